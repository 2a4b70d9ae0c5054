"""Category-aware spatial/temporal feature aggregation and MMD alignment."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .flow_ops import softmax
from .tensor_io import LabelMap


@dataclass
class AggregationConfig:
    # offsets t - t' of the aggregated timesteps; duplicates collapse (tau = 1 gives {1, 2})
    target_offsets: tuple[int, ...] = (1, 2)
    source_offsets: tuple[int, ...] = (1,)
    kernel: str = "linear"
    bandwidth: float | None = None   # RBF only; None -> median heuristic
    lambda_f: float = 0.01

    def __post_init__(self):
        if not self.target_offsets or not self.source_offsets:
            raise ConfigError("aggregation timestep sets must be non-empty")
        if self.lambda_f < 0:
            raise ConfigError("lambda_f must be >= 0")
        if self.kernel not in ("linear", "rbf"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")

    @classmethod
    def for_tau(cls, tau: int, **kw) -> "AggregationConfig":
        return cls(target_offsets=tuple(sorted({1, tau, tau + 1})), **kw)


@dataclass
class CategoryFeatureBank:
    vectors: np.ndarray   # K x C
    valid: np.ndarray     # K bool
    counts: np.ndarray = field(default=None)  # K pixel counts (spatial banks)

    @property
    def num_categories(self) -> int:
        return self.vectors.shape[0]


def spatial_aggregate(fused: np.ndarray, labels: LabelMap) -> CategoryFeatureBank:
    """Masked per-category mean of a C x H x W feature map."""
    c = fused.shape[0]
    if fused.shape[1:] != labels.shape:
        raise ShapeError(f"features {fused.shape} vs labels {labels.shape}")
    k = labels.num_categories
    flat = fused.reshape(c, -1).astype(np.float64)
    lab = labels.values.ravel().astype(np.intp)
    keep = lab < k
    counts = np.bincount(lab[keep], minlength=k).astype(np.float64)
    sums = np.zeros((k, c))
    for ch in range(c):
        sums[:, ch] = np.bincount(lab[keep], weights=flat[ch, keep], minlength=k)
    valid = counts > 0
    vectors = np.zeros((k, c))
    vectors[valid] = sums[valid] / counts[valid, None]
    return CategoryFeatureBank(vectors, valid, counts)


def mean_entropy(logits: np.ndarray) -> float:
    """Pixel-averaged entropy (nats) of the channel softmax of K x H x W logits."""
    if logits.shape[0] < 2:
        raise ShapeError("entropy needs K >= 2 channels")
    p = softmax(np.asarray(logits, dtype=np.float64), axis=0)
    ent = -(p * np.log(np.clip(p, 1e-300, None))).sum(axis=0)
    return float(ent.mean())


def entropy_weights(logits_list: Sequence[np.ndarray]) -> np.ndarray:
    """Temporal weights: softmax over timesteps of negative mean entropy."""
    if not logits_list:
        raise ShapeError("need at least one timestep")
    shape = logits_list[0].shape
    if any(z.shape != shape for z in logits_list):
        raise ShapeError("all timesteps must share one logits shape")
    neg = -np.array([mean_entropy(z) for z in logits_list])
    e = np.exp(neg - neg.max())
    return e / e.sum()


def temporal_aggregate(banks: Sequence[CategoryFeatureBank], weights: np.ndarray) -> CategoryFeatureBank:
    """Weighted sum over timesteps, renormalised over the timesteps where each category is valid."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(banks) != len(weights):
        raise ShapeError(f"{len(banks)} banks but {len(weights)} weights")
    if abs(weights.sum() - 1.0) > 1e-6:
        raise ShapeError(f"temporal weights must sum to 1, got {weights.sum()}")
    k, c = banks[0].vectors.shape
    if any(b.vectors.shape != (k, c) for b in banks):
        raise ShapeError("banks disagree on category count or channels")
    valid = np.stack([b.valid for b in banks])                 # T x K
    wv = weights[:, None] * valid                               # T x K
    norm = wv.sum(axis=0)                                       # K
    any_valid = valid.any(axis=0)
    stacked = np.stack([b.vectors for b in banks])              # T x K x C
    vectors = np.zeros((k, c))
    vectors[any_valid] = (np.einsum("tk,tkc->kc", wv, stacked)[any_valid]
                          / norm[any_valid, None])
    return CategoryFeatureBank(vectors, any_valid)


@dataclass(frozen=True)
class AlignmentResult:
    loss: float
    categories: tuple[int, ...]
    no_overlap: bool


def _as_list(b) -> list[CategoryFeatureBank]:
    return [b] if isinstance(b, CategoryFeatureBank) else list(b)


def common_categories(src: Sequence[CategoryFeatureBank], tgt: Sequence[CategoryFeatureBank]) -> np.ndarray:
    k = src[0].num_categories
    if any(b.num_categories != k for b in list(src) + list(tgt)):
        raise ShapeError("banks disagree on category count")
    return np.flatnonzero(np.logical_and.reduce([b.valid for b in list(src) + list(tgt)]))


def concat_categories(bank: CategoryFeatureBank, cats: np.ndarray) -> np.ndarray:
    """Category-id-ordered concatenation of per-category vectors."""
    return bank.vectors[cats].reshape(-1)


def rbf_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * bandwidth ** 2))


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    z = np.concatenate([x, y])
    d = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu])) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def mmd_align(src, tgt, cfg: AggregationConfig | None = None) -> AlignmentResult:
    """lambda_f-weighted squared MMD between per-category feature concatenations.

    ``src`` and ``tgt`` are a bank or a list of banks (one per mini-batch
    sample).  Only categories valid in every bank take part.
    """
    cfg = cfg or AggregationConfig()
    src, tgt = _as_list(src), _as_list(tgt)
    cats = common_categories(src, tgt)
    if len(cats) == 0:
        return AlignmentResult(0.0, (), True)
    x = np.stack([concat_categories(b, cats) for b in src])
    y = np.stack([concat_categories(b, cats) for b in tgt])
    if cfg.kernel == "linear":
        diff = x.mean(axis=0) - y.mean(axis=0)
        mmd2 = float(diff @ diff)
    else:
        bw = cfg.bandwidth or median_bandwidth(x, y)
        mmd2 = float(rbf_kernel(x, x, bw).mean() + rbf_kernel(y, y, bw).mean()
                     - 2.0 * rbf_kernel(x, y, bw).mean())
    return AlignmentResult(cfg.lambda_f * mmd2, tuple(int(k) for k in cats), False)
