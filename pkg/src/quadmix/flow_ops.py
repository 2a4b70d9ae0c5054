"""Backward warping, flow-guided fusion and cross-frame pseudo-labels.

Flow convention: for output pixel (y, x) the source is sampled at
(x + u, y + v) with (u, v) = flow[y, x].  Out-of-range coordinates are
clamped to the image border.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_io import IGNORE, LabelMap, check_flow


@dataclass(frozen=True)
class _Taps:
    """Bilinear sample positions and weights for one flow field."""

    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    wx: np.ndarray
    wy: np.ndarray

    @property
    def integral(self) -> bool:
        return not (self.wx.any() or self.wy.any())


def _taps(flow: np.ndarray) -> _Taps:
    h, w = flow.shape[:2]
    gy, gx = np.mgrid[0:h, 0:w]
    sx = np.clip(gx + flow[..., 0].astype(np.float64), 0.0, w - 1.0)
    sy = np.clip(gy + flow[..., 1].astype(np.float64), 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return _Taps(x0, x1, y0, y1, sx - x0, sy - y0)


def warp_bilinear(src: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Bilinearly sample a C x H x W tensor along ``flow`` (edge clamped)."""
    src = np.asarray(src)
    if src.ndim != 3:
        raise ShapeError(f"warp source must be C x H x W, got {src.shape}")
    flow = check_flow(flow, src.shape[1:])
    t = _taps(flow)
    if t.integral:
        # the general formula reduces to this gather exactly
        return src[:, t.y0, t.x0].astype(np.result_type(src.dtype, np.float32), copy=False)
    out = ((1.0 - t.wy) * ((1.0 - t.wx) * src[:, t.y0, t.x0] + t.wx * src[:, t.y0, t.x1])
           + t.wy * ((1.0 - t.wx) * src[:, t.y1, t.x0] + t.wx * src[:, t.y1, t.x1]))
    return out.astype(np.result_type(src.dtype, np.float32), copy=False)


def warp_bilinear_adjoint(grad_out: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Transpose of :func:`warp_bilinear` (scatter-add of output gradients)."""
    c, h, w = grad_out.shape
    t = _taps(check_flow(flow, (h, w)))
    grad = np.zeros((c, h * w), dtype=np.float64)
    flat = grad_out.reshape(c, -1).astype(np.float64)
    if t.integral:
        idx = (t.y0 * w + t.x0).ravel()
        for ch in range(c):
            grad[ch] = np.bincount(idx, weights=flat[ch], minlength=h * w)
        return grad.reshape(c, h, w)
    for yy, xx, wgt in ((t.y0, t.x0, (1 - t.wy) * (1 - t.wx)), (t.y0, t.x1, (1 - t.wy) * t.wx),
                        (t.y1, t.x0, t.wy * (1 - t.wx)), (t.y1, t.x1, t.wy * t.wx)):
        idx = (yy * w + xx).ravel()
        contrib = flat * wgt.ravel()
        for ch in range(c):
            grad[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w)
    return grad.reshape(c, h, w)


def warp_labels(src: LabelMap, flow: np.ndarray) -> LabelMap:
    """Nearest-neighbour label warp; IGNORE pixels travel like any other id."""
    h, w = src.shape
    flow = check_flow(flow, (h, w))
    gy, gx = np.mgrid[0:h, 0:w]
    # round half up; ties are resolved toward the larger coordinate
    sx = np.floor(np.clip(gx + flow[..., 0].astype(np.float64), 0, w - 1) + 0.5).astype(np.intp)
    sy = np.floor(np.clip(gy + flow[..., 1].astype(np.float64), 0, h - 1) + 0.5).astype(np.intp)
    sx = np.minimum(sx, w - 1)
    sy = np.minimum(sy, h - 1)
    return src.with_values(src.values[sy, sx])


# --------------------------------------------------------------------------
# fusion


@dataclass
class FusionParams:
    """Per-pixel linear map over a channel concatenation [a; b] (2C -> C)."""

    weight: np.ndarray  # C x 2C
    bias: np.ndarray    # C

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        c = self.weight.shape[0]
        if self.weight.shape != (c, 2 * c) or self.bias.shape != (c,):
            raise ShapeError(f"fusion weight must be C x 2C with bias C, got {self.weight.shape}, {self.bias.shape}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ShapeError("fusion parameters must be finite")

    @classmethod
    def averaging(cls, channels: int) -> "FusionParams":
        eye = 0.5 * np.eye(channels)
        return cls(np.concatenate([eye, eye], axis=1), np.zeros(channels))

    @property
    def channels(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "FusionParams":
        return FusionParams(self.weight.copy(), self.bias.copy())


def fuse(f_prev_warped: np.ndarray, f_t: np.ndarray, p: FusionParams) -> np.ndarray:
    """Fuse a warped previous-frame feature with the current one (C x H x W each)."""
    if f_prev_warped.shape != f_t.shape or f_t.ndim != 3:
        raise ShapeError(f"fuse operands differ: {f_prev_warped.shape} vs {f_t.shape}")
    c, h, w = f_t.shape
    if p.channels != c:
        raise ShapeError(f"fusion params expect {p.channels} channels, features have {c}")
    z = np.concatenate([f_prev_warped, f_t], axis=0).reshape(2 * c, -1)
    out = p.weight @ z + p.bias[:, None]
    return out.reshape(c, h, w)


# --------------------------------------------------------------------------
# pseudo-labels


@dataclass
class PseudoLabelConfig:
    tau: int = 1
    confidence_threshold: float = 0.9

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must lie in (0, 1]")


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def filter_confident(probs: np.ndarray, threshold: float, num_categories: int | None = None) -> LabelMap:
    """Argmax labels with pixels below ``threshold`` max-probability set to IGNORE."""
    k = probs.shape[0]
    labels = probs.argmax(axis=0).astype(np.uint16)
    labels[probs.max(axis=0) < threshold] = IGNORE
    return LabelMap(labels, num_categories or k)


def generate_pseudo_label(logits: np.ndarray, flow: np.ndarray | None,
                          cfg: PseudoLabelConfig | None = None) -> LabelMap:
    """Cross-frame pseudo-label for frame t from decoder logits of frame t - tau.

    Softmax, warp each probability channel along the flow t-tau -> t,
    renormalise, then argmax with confidence filtering.  ``flow=None`` skips
    the warp (image mode / no-warp ablation).
    """
    cfg = cfg or PseudoLabelConfig()
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] < 2:
        raise ShapeError(f"logits must be K x H x W with K >= 2, got {logits.shape}")
    probs = softmax(logits, axis=0)
    if flow is not None:
        probs = warp_bilinear(probs, flow)
        probs = probs / probs.sum(axis=0, keepdims=True)
    return filter_confident(probs, cfg.confidence_threshold)
