"""SplitMix64 randomness, category selection and the target augmentation A."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, PolicyError, ShapeError
from .tensor_io import check_frames

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class Rng:
    """SplitMix64 generator; identical seeds give identical streams everywhere."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Float in [low, high) built from the top 53 bits."""
        return low + (high - low) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("below() needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def integers(self, low: int, high: int) -> int:
        """Integer in the closed range [low, high]."""
        return low + self.below(high - low + 1)

    def normal(self) -> float:
        # Box-Muller, cosine branch only so each call consumes exactly two draws.
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def u64_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs of ``next_u64`` as one uint64 array."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        self.state = (self.state + n * GOLDEN) & MASK64
        return z ^ (z >> np.uint64(31))

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal_array(self, shape, scale: float = 1.0) -> np.ndarray:
        """Same values as repeated ``normal()`` calls, vectorised."""
        n = int(np.prod(shape))
        u = self.uniform_array(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return scale * z.reshape(shape)

    def sample(self, population: Sequence[int], k: int) -> list[int]:
        """k distinct items, uniform without replacement (partial Fisher-Yates)."""
        items = list(population)
        if k > len(items):
            raise ValueError(f"cannot draw {k} from {len(items)} items")
        for i in range(k):
            j = i + self.below(len(items) - i)
            items[i], items[j] = items[j], items[i]
        return items[:k]

    def fork(self) -> "Rng":
        """Child generator for a parallel worker; seeded from this stream."""
        return Rng(self.next_u64())


# --------------------------------------------------------------------------
# category selection

POOLS = ("all", "things", "stuff", "movable", "stationary")

# Class divisions of the two public video benchmarks, kept as reference data
# for configuring real-data policies.
SYNTHIA_SEQ_CLASSES = ("road", "side", "building", "pole", "light", "sign",
                       "vegetation", "sky", "person", "rider", "car")
SYNTHIA_SEQ_DIVISION = {
    "things": ("building", "pole", "light", "sign", "person", "rider", "car"),
    "stuff": ("road", "side", "vegetation", "sky"),
    "movable": ("person", "rider", "car"),
    "stationary": ("road", "side", "building", "pole", "light", "sign", "vegetation", "sky"),
}
SYNTHIA_SEQ_LONG_TAIL = ("pole", "light", "sign", "rider")

VIPER_CLASSES = ("road", "side", "building", "fence", "light", "sign", "vegetation",
                 "terrain", "sky", "person", "car", "truck", "bus", "motorcycle", "bike")
VIPER_DIVISION = {
    "things": ("building", "fence", "light", "sign", "person", "car", "truck", "bus",
               "motorcycle", "bike"),
    "stuff": ("road", "side", "vegetation", "terrain", "sky"),
    "movable": ("person", "car", "truck", "bus", "motorcycle", "bike"),
    "stationary": ("road", "side", "building", "fence", "light", "sign", "vegetation",
                   "terrain", "sky"),
}
VIPER_LONG_TAIL = ("fence", "light", "sign", "terrain", "motorcycle", "bike")


def division_ids(classes: Sequence[str], division: dict[str, Sequence[str]]) -> dict[str, list[int]]:
    """Translate a name-based class division into id lists, plus the ``all`` pool."""
    index = {name: i for i, name in enumerate(classes)}
    out = {"all": list(range(len(classes)))}
    for pool, names in division.items():
        out[pool] = sorted(index[n] for n in names)
    return out


@dataclass
class CategoryPolicy:
    domain_space: list[int]
    pool: str = "all"
    divisions: dict[str, list[int]] = field(default_factory=dict)
    long_tail_pool: list[int] = field(default_factory=list)
    picks_per_iteration: int = 2
    max_long_tail: int = 2

    def __post_init__(self):
        if self.pool not in POOLS:
            raise ConfigError(f"unknown pool {self.pool!r}; expected one of {POOLS}")
        if self.picks_per_iteration < 0:
            raise ConfigError("picks_per_iteration must be >= 0")
        space = set(self.domain_space)
        if not set(self.pool_ids()) <= space:
            raise ConfigError(f"pool {self.pool!r} is not a subset of the domain space")
        if not set(self.long_tail_pool) <= space:
            raise ConfigError("long_tail_pool is not a subset of the domain space")

    def pool_ids(self) -> list[int]:
        if self.pool == "all":
            return sorted(self.domain_space)
        if self.pool not in self.divisions:
            raise ConfigError(f"no class division provided for pool {self.pool!r}")
        return sorted(self.divisions[self.pool])


def pick_categories(rng: Rng, policy: CategoryPolicy, exclude: Iterable[int] = (),
                    include_long_tail: bool = False) -> list[int]:
    """Draw template categories from ``policy.pool`` minus ``exclude``.

    With ``include_long_tail`` (source-side templates) up to ``max_long_tail``
    long-tail ids are appended; the result is de-duplicated, first draw first.
    """
    exclude = set(exclude)
    candidates = [k for k in policy.pool_ids() if k not in exclude]
    if len(candidates) < policy.picks_per_iteration:
        raise PolicyError(
            f"pool {policy.pool!r} has {len(candidates)} categories left after exclusion, "
            f"need {policy.picks_per_iteration}")
    picked = rng.sample(candidates, policy.picks_per_iteration)
    if include_long_tail and policy.long_tail_pool:
        tail = [k for k in sorted(set(policy.long_tail_pool)) if k not in exclude]
        for k in rng.sample(tail, min(policy.max_long_tail, len(tail))):
            if k not in picked:
                picked.append(k)
    return picked


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    probability: float = 0.8
    blur_kernel_sizes: tuple[int, ...] = (3, 5, 7)
    blur_sigma: tuple[float, float] = (0.15, 1.15)
    jitter_gain: tuple[float, float] = (0.75, 1.25)
    jitter_shift: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("augment probability must lie in [0, 1]")
        if any(k % 2 == 0 or k < 1 for k in self.blur_kernel_sizes):
            raise ConfigError("blur kernel sizes must be odd and positive")


@dataclass(frozen=True)
class AugmentParams:
    """Concrete draw of the augmentation; shared by every frame of a stack."""

    kernel_size: int | None = None
    sigma: float | None = None
    gain: tuple[float, float, float] | None = None
    shift: tuple[float, float, float] | None = None

    @property
    def identity(self) -> bool:
        return self.kernel_size is None and self.gain is None


def draw_augment(rng: Rng, cfg: AugmentConfig) -> AugmentParams:
    """Draw order: apply?, which ops (blur / jitter / both), blur params, gains, shifts."""
    if rng.uniform() >= cfg.probability:
        return AugmentParams()
    ops = rng.below(3)  # 0 blur, 1 jitter, 2 both
    kernel_size = sigma = gain = shift = None
    if ops in (0, 2):
        kernel_size = cfg.blur_kernel_sizes[rng.below(len(cfg.blur_kernel_sizes))]
        sigma = rng.uniform(*cfg.blur_sigma)
    if ops in (1, 2):
        gain = tuple(rng.uniform(*cfg.jitter_gain) for _ in range(3))
        shift = tuple(rng.uniform(*cfg.jitter_shift) for _ in range(3))
    return AugmentParams(kernel_size, sigma, gain, shift)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - size // 2
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode="edge")
    n = x.shape[axis]
    out = np.zeros_like(x)
    for i, w in enumerate(kernel):
        out += w * np.take(xp, np.arange(i, i + n), axis=axis)
    return out


def apply_augment(frames: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply fixed augmentation parameters to a T x 3 x H x W stack."""
    frames = check_frames(frames)
    if frames.shape[1] != 3:
        raise ShapeError(f"augmentation needs 3 channels, got {frames.shape[1]}")
    if params.identity:
        return frames.copy()
    x = frames.astype(np.float64)
    if params.kernel_size is not None:
        k = gaussian_kernel(params.kernel_size, params.sigma)
        x = _blur_axis(_blur_axis(x, k, axis=2), k, axis=3)
    if params.gain is not None:
        gain = np.asarray(params.gain).reshape(1, 3, 1, 1)
        shift = np.asarray(params.shift).reshape(1, 3, 1, 1)
        x = x * gain + shift
    return np.clip(x, 0.0, 1.0).astype(frames.dtype)


def augment(rng: Rng, frames: np.ndarray, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Random Gaussian blur and/or colour jitter, identical across the frames of a stack."""
    return apply_augment(frames, draw_augment(rng, cfg or AugmentConfig()))
