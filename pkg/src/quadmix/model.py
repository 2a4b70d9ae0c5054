"""Tiny segmentation model with exact, hand-written gradients.

Per-pixel features are fixed (not learned); what is learned is the temporal
fusion layer, the feature-level mixing map psi and a linear classifier.
Everything downstream of the features is a composition of linear maps,
bilinear warps and softmax, so gradients are exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .flow_ops import FusionParams, warp_bilinear, warp_bilinear_adjoint
from .rng import Rng

FEATURE_CHANNELS = 9
# rough per-channel mid-point of the features; the fusion bias starts at its
# negative so the classifier sees centred inputs (better conditioned SGD)
FEATURE_CENTER = np.array([0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.0])
TRAINABLE = ("fusion.weight", "fusion.bias", "classifier.weight", "classifier.bias", "psi.weight")


def _box3(x: np.ndarray) -> np.ndarray:
    """3x3 mean over the last two axes with edge clamping."""
    h, w = x.shape[-2:]
    p = np.pad(x.astype(np.float64), [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    rows = p[..., 0:h, :] + p[..., 1:h + 1, :] + p[..., 2:h + 2, :]
    return (rows[..., 0:w] + rows[..., 1:w + 1] + rows[..., 2:w + 2]) / 9.0


def extract_features(frames: np.ndarray) -> np.ndarray:
    """T x 3 x H x W frames -> T x 9 x H x W features.

    Channels: R, G, B, x / W, y / H, 3x3 local mean of R, G, B and the 3x3
    local standard deviation of luminance.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"expected T x 3 x H x W frames, got {frames.shape}")
    t, _, h, w = frames.shape
    gy, gx = np.mgrid[0:h, 0:w]
    pos = np.stack([gx / w, gy / h]).astype(np.float64)
    pos = np.broadcast_to(pos, (t, 2, h, w))
    lum = frames.mean(axis=1, keepdims=True)
    std = np.sqrt(np.maximum(_box3(lum * lum) - _box3(lum) ** 2, 0.0))
    return np.concatenate([frames, pos, _box3(frames), std], axis=1)


@dataclass
class ToyModel:
    fusion: FusionParams
    classifier_weight: np.ndarray   # K x C
    classifier_bias: np.ndarray     # K
    psi: FusionParams

    @classmethod
    def init(cls, num_categories: int, rng: Rng, scale: float = 0.01) -> "ToyModel":
        c = FEATURE_CHANNELS
        fusion = FusionParams.averaging(c)
        fusion.bias[:] = -FEATURE_CENTER
        return cls(fusion, rng.normal_array((num_categories, c), scale),
                   np.zeros(num_categories), FusionParams.averaging(c))

    @property
    def num_categories(self) -> int:
        return self.classifier_weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        """Trainable parameters by name (live references)."""
        return {
            "fusion.weight": self.fusion.weight,
            "fusion.bias": self.fusion.bias,
            "classifier.weight": self.classifier_weight,
            "classifier.bias": self.classifier_bias,
            "psi.weight": self.psi.weight,
        }

    def copy(self) -> "ToyModel":
        return ToyModel(self.fusion.copy(), self.classifier_weight.copy(),
                        self.classifier_bias.copy(), self.psi.copy())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params().values())

    def predict_logits(self, frames: np.ndarray, flow: np.ndarray | None) -> np.ndarray:
        _, logits, _ = head_forward(self, extract_features(frames), flow)
        return logits


@dataclass
class HeadCache:
    z: np.ndarray           # 2C x N concatenated [warped prev; current]
    fused: np.ndarray       # C x N
    flow: np.ndarray | None
    frames: int             # T of the input stack
    hw: tuple[int, int]


def head_forward(model: ToyModel, feats: np.ndarray, flow: np.ndarray | None):
    """Warp, fuse and classify a T x C x H x W feature stack.

    Returns ``(fused C x H x W, logits K x H x W, cache)``.  With T = 1 (image
    mode) the current features stand in for the warped previous ones.
    """
    t, c, h, w = feats.shape
    if t == 2:
        if flow is None:
            raise ShapeError("video features need a flow field")
        prev = warp_bilinear(feats[0], flow)
    elif t == 1:
        prev = feats[0]
    else:
        raise ShapeError(f"feature stack must have T in {{1, 2}}, got {t}")
    z = np.concatenate([prev, feats[-1]], axis=0).reshape(2 * c, -1)
    fused = model.fusion.weight @ z + model.fusion.bias[:, None]
    logits = model.classifier_weight @ fused + model.classifier_bias[:, None]
    cache = HeadCache(z, fused, flow, t, (h, w))
    k = logits.shape[0]
    return fused.reshape(c, h, w), logits.reshape(k, h, w), cache


def head_backward(model: ToyModel, cache: HeadCache, grads: dict[str, np.ndarray],
                  g_logits: np.ndarray | None = None, g_fused: np.ndarray | None = None,
                  need_input_grad: bool = False) -> np.ndarray | None:
    """Accumulate parameter gradients into ``grads``; optionally return d/d(feats)."""
    c = model.fusion.channels
    h, w = cache.hw
    g = np.zeros((c, h * w)) if g_fused is None else g_fused.reshape(c, -1).copy()
    if g_logits is not None:
        gl = g_logits.reshape(g_logits.shape[0], -1)
        grads["classifier.weight"] += gl @ cache.fused.T
        grads["classifier.bias"] += gl.sum(axis=1)
        g += model.classifier_weight.T @ gl
    grads["fusion.weight"] += g @ cache.z.T
    grads["fusion.bias"] += g.sum(axis=1)
    if not need_input_grad:
        return None
    gz = (model.fusion.weight.T @ g).reshape(2 * c, h, w)
    if cache.frames == 1:
        return (gz[:c] + gz[c:])[None]
    return np.stack([warp_bilinear_adjoint(gz[:c], cache.flow), gz[c:]])
