"""ShiftWorld: procedural two-domain video clips with exact labels and flow.

Shapes move rigidly with integer velocities, so the backward flow between any
two frames is exact.  Source and target share the geometry sampler and differ
only in rendering style (palette hue rotation, darker exposure, sensor noise).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .tensor_io import LabelMap, read_tensor, write_tensor

CATEGORIES = ("background", "circle", "square", "triangle", "star")
BACKGROUND, CIRCLE, SQUARE, TRIANGLE, STAR = range(5)
SHAPE_IDS = (CIRCLE, SQUARE, TRIANGLE)
LONG_TAIL = (STAR,)

# every shape moves, the background never does
DIVISION = {
    "things": [CIRCLE, SQUARE, TRIANGLE, STAR],
    "stuff": [BACKGROUND],
    "movable": [CIRCLE, SQUARE, TRIANGLE, STAR],
    "stationary": [BACKGROUND],
}

BASE_PALETTE = np.array([
    [0.55, 0.55, 0.50],   # background
    [0.85, 0.25, 0.20],   # circle
    [0.20, 0.70, 0.30],   # square
    [0.25, 0.35, 0.85],   # triangle
    [0.90, 0.80, 0.20],   # star
])


@dataclass
class ShiftWorldConfig:
    height: int = 64
    width: int = 64
    num_categories: int = 5
    clip_length: int = 4
    min_shapes: int = 2
    max_shapes: int = 4
    max_speed: int = 3
    min_radius: int = 8
    max_radius: int = 14
    star_fraction: float = 0.06
    shade_range: tuple[float, float] = (0.8, 1.0)
    texture_amplitude: float = 0.0
    hue_rotation_deg: float = 40.0
    target_brightness: float = 0.8
    target_noise: float = 0.03
    train_clips: int = 200
    test_clips: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.num_categories != len(CATEGORIES):
            raise ConfigError(f"ShiftWorld has exactly {len(CATEGORIES)} categories")
        if self.clip_length < 2:
            raise ConfigError("clip_length must be >= 2")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 0 <= min_shapes <= max_shapes")
        if not 1 <= self.min_radius <= self.max_radius:
            raise ConfigError("need 1 <= min_radius <= max_radius")
        travel = self.max_speed * (self.clip_length - 1)
        need = 2 * self.max_radius + 1 + travel
        if need > min(self.height, self.width):
            raise ConfigError(
                f"shapes too large for {self.height}x{self.width}: radius {self.max_radius} "
                f"moving {travel} px needs {need} px")
        if not 0.0 <= self.star_fraction < 0.1:
            raise ConfigError("star_fraction must keep stars below 10% of clips")

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftWorldConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        d = dict(d)
        if "shade_range" in d:
            d["shade_range"] = tuple(d["shade_range"])
        return cls(**d)


@dataclass(frozen=True)
class Shape:
    category: int
    cx: int
    cy: int
    radius: int
    vx: int
    vy: int
    shade: float

    def center(self, t: int) -> tuple[int, int]:
        return self.cx + self.vx * t, self.cy + self.vy * t

    def mask(self, t: int, h: int, w: int) -> np.ndarray:
        cx, cy = self.center(t)
        gy, gx = np.mgrid[0:h, 0:w]
        dx = (gx - cx).astype(np.float64)
        dy = (gy - cy).astype(np.float64)
        r = float(self.radius)
        if self.category == CIRCLE:
            return dx * dx + dy * dy <= r * r
        if self.category == SQUARE:
            s = 0.85 * r
            return (np.abs(dx) <= s) & (np.abs(dy) <= s)
        if self.category == TRIANGLE:
            return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
        if self.category == STAR:
            rho = np.hypot(dx, dy)
            theta = np.arctan2(dy, dx)
            return rho <= r * (0.45 + 0.55 * np.abs(np.cos(2.5 * theta)))
        raise ValueError(f"not a shape category: {self.category}")


@dataclass
class Clip:
    frames: np.ndarray    # L x 3 x H x W float32
    labels: np.ndarray    # L x H x W uint16
    surface: np.ndarray   # L x H x W int16, -1 background, else shape index
    shapes: list[Shape]
    num_categories: int = len(CATEGORIES)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def label(self, t: int) -> LabelMap:
        return LabelMap(self.labels[t], self.num_categories)

    def flow(self, t_src: int, t_dst: int) -> np.ndarray:
        """Backward flow on frame ``t_dst``: where each pixel was at ``t_src``."""
        h, w = self.surface.shape[1:]
        out = np.zeros((h, w, 2), dtype=np.float32)
        ids = self.surface[t_dst]
        dt = t_dst - t_src
        for i, s in enumerate(self.shapes):
            sel = ids == i
            out[sel, 0] = -s.vx * dt
            out[sel, 1] = -s.vy * dt
        return out

    def stack(self, t: int, video: bool = True) -> np.ndarray:
        return self.frames[t - 1:t + 1] if video else self.frames[t:t + 1]

    def consistency_mask(self, t_src: int, t_dst: int) -> np.ndarray:
        """Pixels of ``t_dst`` whose flow source shows the same surface at ``t_src``."""
        h, w = self.surface.shape[1:]
        f = self.flow(t_src, t_dst)
        gy, gx = np.mgrid[0:h, 0:w]
        sx = gx + f[..., 0].astype(np.int64)
        sy = gy + f[..., 1].astype(np.int64)
        inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
        same = np.zeros((h, w), dtype=bool)
        same[inside] = self.surface[t_src][sy[inside], sx[inside]] == self.surface[t_dst][inside]
        return same


def hue_rotation(deg: float) -> np.ndarray:
    """RGB rotation about the grey axis (Rodrigues)."""
    a = math.radians(deg)
    k = np.ones(3) / math.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(a) * kx + (1 - math.cos(a)) * (kx @ kx)


def style_palette(cfg: ShiftWorldConfig, domain: str) -> np.ndarray:
    if domain == "source":
        return BASE_PALETTE.copy()
    rot = hue_rotation(cfg.hue_rotation_deg)
    return np.clip(BASE_PALETTE @ rot.T, 0.0, 1.0) * cfg.target_brightness


def sample_geometry(rng: Rng, cfg: ShiftWorldConfig, with_star: bool) -> tuple[list[Shape], tuple[float, float]]:
    n = rng.integers(cfg.min_shapes, cfg.max_shapes)
    shapes = []
    span = cfg.clip_length - 1
    for i in range(n):
        cat = SHAPE_IDS[rng.below(len(SHAPE_IDS))]
        r = rng.integers(cfg.min_radius, cfg.max_radius)
        vx = rng.integers(-cfg.max_speed, cfg.max_speed)
        vy = rng.integers(-cfg.max_speed, cfg.max_speed)
        cx = rng.integers(r - min(0, vx * span), cfg.width - 1 - r - max(0, vx * span))
        cy = rng.integers(r - min(0, vy * span), cfg.height - 1 - r - max(0, vy * span))
        shade = rng.uniform(*cfg.shade_range)
        shapes.append(Shape(cat, cx, cy, r, vx, vy, shade))
    if with_star:
        if shapes:
            j = rng.below(len(shapes))
            shapes[j] = Shape(STAR, *[getattr(shapes[j], f) for f in ("cx", "cy", "radius", "vx", "vy", "shade")])
        else:
            r = cfg.max_radius
            shapes.append(Shape(STAR, cfg.width // 2, cfg.height // 2, r, 0, 0, 1.0))
    phase = (rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi))
    return shapes, phase


def render_clip(shapes: list[Shape], phase, cfg: ShiftWorldConfig, pal: np.ndarray,
                noise_rng: Rng | None, noise: float) -> Clip:
    h, w, n = cfg.height, cfg.width, cfg.clip_length
    gy, gx = np.mgrid[0:h, 0:w]
    texture = 1.0 + cfg.texture_amplitude * np.sin(gx / 5.0 + phase[0]) * np.sin(gy / 7.0 + phase[1])
    frames = np.zeros((n, 3, h, w))
    labels = np.zeros((n, h, w), dtype=np.uint16)
    surface = np.full((n, h, w), -1, dtype=np.int16)
    for t in range(n):
        img = pal[BACKGROUND][:, None, None] * texture[None]
        for i, s in enumerate(shapes):  # later shapes are drawn on top
            m = s.mask(t, h, w)
            img = np.where(m[None], (pal[s.category] * s.shade)[:, None, None], img)
            labels[t][m] = s.category
            surface[t][m] = i
        if noise > 0 and noise_rng is not None:
            img = img + noise_rng.normal_array((3, h, w), noise)
        frames[t] = np.clip(img, 0.0, 1.0)
    return Clip(frames.astype(np.float32), labels, surface, shapes)


def _star_slots(rng: Rng, n: int, fraction: float) -> set[int]:
    k = int(math.floor(fraction * n))
    return set(rng.sample(range(n), k)) if k else set()


def generate_split(rng: Rng, cfg: ShiftWorldConfig, n: int, domain: str) -> list[Clip]:
    pal = style_palette(cfg, domain)
    noise = cfg.target_noise if domain == "target" else 0.0
    stars = _star_slots(rng, n, cfg.star_fraction)
    clips = []
    for i in range(n):
        shapes, phase = sample_geometry(rng, cfg, i in stars)
        clips.append(render_clip(shapes, phase, cfg, pal, rng, noise))
    return clips


@dataclass
class ShiftWorld:
    config: ShiftWorldConfig
    source: list[Clip]
    target: list[Clip]
    target_test: list[Clip]
    source_test: list[Clip] = field(default_factory=list)


def generate(cfg: ShiftWorldConfig) -> ShiftWorld:
    """Deterministic from ``cfg.seed``; each split draws from its own forked stream."""
    root = Rng(cfg.seed)
    streams = [root.fork() for _ in range(4)]
    return ShiftWorld(
        cfg,
        source=generate_split(streams[0], cfg, cfg.train_clips, "source"),
        target=generate_split(streams[1], cfg, cfg.train_clips, "target"),
        target_test=generate_split(streams[2], cfg, cfg.test_clips, "target"),
        source_test=generate_split(streams[3], cfg, cfg.test_clips, "source"),
    )


# --------------------------------------------------------------------------
# on-disk layout: <root>/<split>/clip_NNNN/{frames,labels,flows}.qtns + manifest.json

SPLITS = ("source", "target", "target_test", "source_test")


def save(world: ShiftWorld, root: str | Path) -> Path:
    root = Path(root)
    manifest = {"config": _config_json(world.config), "categories": list(CATEGORIES), "splits": {}}
    for split in SPLITS:
        entries = []
        for i, clip in enumerate(getattr(world, split)):
            d = root / split / f"clip_{i:04d}"
            d.mkdir(parents=True, exist_ok=True)
            write_tensor(clip.frames, d / "frames.qtns")
            write_tensor(clip.labels, d / "labels.qtns")
            flows = np.stack([clip.flow(t - 1, t) for t in range(1, clip.length)])
            write_tensor(flows, d / "flows.qtns")
            entries.append({"path": f"{split}/clip_{i:04d}",
                            "shapes": [asdict(s) for s in clip.shapes]})
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _config_json(cfg: ShiftWorldConfig) -> dict:
    d = asdict(cfg)
    d["shade_range"] = list(cfg.shade_range)
    return d


def load(root: str | Path) -> ShiftWorld:
    """Rebuild a saved dataset; surface ids are re-derived from the manifest shapes."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = ShiftWorldConfig.from_dict(manifest["config"])
    splits = {}
    for split in SPLITS:
        clips = []
        for entry in manifest["splits"].get(split, []):
            d = root / entry["path"]
            shapes = [Shape(**s) for s in entry["shapes"]]
            frames = read_tensor(d / "frames.qtns")
            labels = read_tensor(d / "labels.qtns")
            surface = np.full(labels.shape, -1, dtype=np.int16)
            for t in range(labels.shape[0]):
                for i, s in enumerate(shapes):
                    surface[t][s.mask(t, cfg.height, cfg.width)] = i
            clips.append(Clip(np.array(frames), np.array(labels), surface, shapes))
        splits[split] = clips
    return ShiftWorld(cfg, **splits)
