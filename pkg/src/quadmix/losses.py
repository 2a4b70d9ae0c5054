"""Segmentation losses and the full training objective with analytic gradients.

L_all = L_QuadMix + L_Agg + L_SSL.  Pseudo-labels, templates and augmentation
are inputs (detached); gradients flow through psi, the fusion layer, the
classifier, spatial/temporal aggregation (including the entropy weights) and
the alignment loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import (AggregationConfig, CategoryFeatureBank, common_categories,
                          median_bandwidth, rbf_kernel, spatial_aggregate, temporal_aggregate)
from .errors import ConfigError, PolicyError
from .flow_ops import softmax
from .mixing import MixBundle, feature_mix, resize_bilinear
from .model import ToyModel, extract_features, head_backward, head_forward
from .tensor_io import LabelMap


@dataclass
class LossWeights:
    lambda_T: float = 1.0
    lambda_f: float = 0.01

    def __post_init__(self):
        if self.lambda_T < 0 or self.lambda_f < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class CEResult:
    loss: float
    empty: bool
    grad: np.ndarray | None = None   # d loss / d logits, K x H x W


def cross_entropy(logits: np.ndarray, target: LabelMap, with_grad: bool = False) -> CEResult:
    """Mean negative log-likelihood over non-ignored pixels."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[0]
    flat = logits.reshape(k, -1)
    lab = target.values.ravel().astype(np.intp)
    valid = lab < k
    n = int(valid.sum())
    if n == 0:
        return CEResult(0.0, True, np.zeros_like(logits) if with_grad else None)
    z = flat - flat.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    idx = np.flatnonzero(valid)
    loss = float(-logp[lab[idx], idx].sum() / n)
    grad = None
    if with_grad:
        g = np.exp(logp)
        g[lab[idx], idx] -= 1.0
        g[:, ~valid] = 0.0
        grad = (g / n).reshape(logits.shape)
    return CEResult(loss, False, grad)


# --------------------------------------------------------------------------
# prepared inputs


@dataclass
class StreamInput:
    """One forward pass of the model: feature stack, flow and (detached) labels."""

    feats: np.ndarray               # T x C x H x W
    flow: np.ndarray | None
    labels: LabelMap | None = None

    @classmethod
    def from_frames(cls, frames: np.ndarray, flow: np.ndarray | None, labels: LabelMap | None = None):
        return cls(extract_features(frames), flow, labels)

    @classmethod
    def from_bundle(cls, bundle: MixBundle) -> "StreamInput":
        return cls.from_frames(bundle.frames, bundle.flow, bundle.label)


@dataclass
class SampleInputs:
    """Everything one training sample contributes to L_all."""

    ssl_source: StreamInput
    ssl_target: StreamInput | None = None      # augmented frames, pseudo-labels
    quad_source: StreamInput | None = None     # T→(S→S)
    quad_target: StreamInput | None = None     # S→(T→T), augmented
    union: np.ndarray | None = None            # set -> feature-level template mixing
    agg_source: list[StreamInput] = field(default_factory=list)
    agg_target: list[StreamInput] = field(default_factory=list)


def check_quad_tags(src: MixBundle, tgt: MixBundle) -> None:
    if src.tag != "T→(S→S)" or tgt.tag != "S→(T→T)":
        raise PolicyError(f"quad-mixed bundles must be T→(S→S) and S→(T→T), got {src.tag!r}, {tgt.tag!r}")


# --------------------------------------------------------------------------
# objective


@dataclass
class Objective:
    quadmix: float
    agg: float
    ssl: float
    grads: dict[str, np.ndarray] | None = None
    agg_categories: tuple[int, ...] = ()

    @property
    def total(self) -> float:
        return self.quadmix + self.agg + self.ssl


def total_loss(l_quadmix: float, l_agg: float, l_ssl: float) -> float:
    return l_quadmix + l_agg + l_ssl


def _ce_term(model, stream: StreamInput, weight: float, grads, feats=None):
    """Weighted CE of one stream; returns (loss, cache, g_logits)."""
    feats = stream.feats if feats is None else feats
    _, logits, cache = head_forward(model, feats, stream.flow)
    res = cross_entropy(logits, stream.labels, with_grad=grads is not None)
    g = None if res.grad is None else weight * res.grad
    return weight * res.loss, cache, g


def _entropy_and_grad(logits: np.ndarray):
    k = logits.shape[0]
    p = softmax(logits.reshape(k, -1), axis=0)
    logp = np.log(np.clip(p, 1e-300, None))
    ent = -(p * logp).sum(axis=0)
    n = ent.size
    # d mean-entropy / d logits
    d = -p * (logp + ent[None]) / n
    return float(ent.mean()), d.reshape(logits.shape)


class _Branch:
    """Forward state of one aggregation branch (one domain, one sample)."""

    def __init__(self, model, streams: Sequence[StreamInput]):
        self.caches, self.spatial, self.dents, self.labels = [], [], [], []
        ents = []
        for s in streams:
            fused, logits, cache = head_forward(model, s.feats, s.flow)
            self.caches.append(cache)
            self.labels.append(s.labels)
            self.spatial.append(spatial_aggregate(fused, s.labels))
            e, d = _entropy_and_grad(logits)
            ents.append(e)
            self.dents.append(d)
        neg = -np.array(ents)
        w = np.exp(neg - neg.max())
        self.weights = w / w.sum()
        self.bank = temporal_aggregate(self.spatial, self.weights)

    def backward(self, model, g_vectors: np.ndarray, grads) -> None:
        valid = np.stack([b.valid for b in self.spatial]).astype(np.float64)   # T x K
        wv = self.weights[:, None] * valid
        norm = wv.sum(axis=0)
        safe = np.where(norm > 0, norm, 1.0)
        # d f[k] / d f_j[k] = w_j v_jk / S_k ;  d f[k] / d w_j = v_jk (f_j[k] - f[k]) / S_k
        g_w = np.array([(valid[j] / safe * ((b.vectors - self.bank.vectors) * g_vectors).sum(axis=1)).sum()
                        for j, b in enumerate(self.spatial)])
        g_e = -self.weights * (g_w - self.weights @ g_w)   # back through softmax(-e)
        for j, (bank, cache) in enumerate(zip(self.spatial, self.caches)):
            g_fused = _spatial_backward(bank, self.labels[j], g_vectors * (wv[j] / safe)[:, None])
            head_backward(model, cache, grads, g_logits=g_e[j] * self.dents[j], g_fused=g_fused)


def _spatial_backward(bank: CategoryFeatureBank, labels: LabelMap, g_vectors: np.ndarray) -> np.ndarray:
    """Gradient of masked means w.r.t. the C x N feature map."""
    lab = labels.values.ravel().astype(np.intp)
    keep = lab < bank.num_categories
    counts = np.where(bank.counts > 0, bank.counts, 1.0)
    g = np.zeros((g_vectors.shape[1], lab.size))
    g[:, keep] = (g_vectors / counts[:, None])[lab[keep]].T
    return g


def _mmd_grad(x: np.ndarray, y: np.ndarray, cfg: AggregationConfig, lam: float):
    """Loss and gradients of lam * MMD^2 w.r.t. batch rows of x and y."""
    if cfg.kernel == "linear":
        diff = x.mean(axis=0) - y.mean(axis=0)
        loss = lam * float(diff @ diff)
        gx = np.broadcast_to(2 * lam * diff / len(x), x.shape).copy()
        gy = np.broadcast_to(-2 * lam * diff / len(y), y.shape).copy()
        return loss, gx, gy
    bw = cfg.bandwidth or median_bandwidth(x, y)   # bandwidth is not differentiated
    kxx, kyy, kxy = rbf_kernel(x, x, bw), rbf_kernel(y, y, bw), rbf_kernel(x, y, bw)
    n, m = len(x), len(y)
    loss = lam * float(kxx.mean() + kyy.mean() - 2 * kxy.mean())
    s2 = bw ** 2

    def dk(a, b, kab):  # sum_j d k(a_i, b_j) / d a_i
        return -(kab[:, :, None] * (a[:, None, :] - b[None, :, :])).sum(axis=1) / s2

    gx = lam * (2 * dk(x, x, kxx) / (n * n) - 2 * dk(x, y, kxy) / (n * m))
    gy = lam * (2 * dk(y, y, kyy) / (m * m) - 2 * dk(y, x, kxy.T) / (n * m))
    return loss, gx, gy


def compute_objective(model: ToyModel, samples: Sequence[SampleInputs], weights: LossWeights,
                      agg_cfg: AggregationConfig | None = None, with_grad: bool = True) -> Objective:
    """Evaluate L_QuadMix, L_Agg and L_SSL (mini-batch means) and their gradients."""
    agg_cfg = agg_cfg or AggregationConfig()
    grads = model.zero_grads() if with_grad else None
    bsz = len(samples)
    l_quad = l_ssl = 0.0

    for s in samples:
        # self-supervised term on raw samples
        loss, cache, g = _ce_term(model, s.ssl_source, 1.0 / bsz, grads)
        l_ssl += loss
        if grads is not None:
            head_backward(model, cache, grads, g_logits=g)
        if s.ssl_target is not None and weights.lambda_T > 0:
            loss, cache, g = _ce_term(model, s.ssl_target, weights.lambda_T / bsz, grads)
            l_ssl += loss
            if grads is not None:
                head_backward(model, cache, grads, g_logits=g)

        # quad-mixed domains
        if s.quad_source is not None:
            loss, cache, g = _ce_term(model, s.quad_source, 1.0 / bsz, grads)
            l_quad += loss
            if grads is not None:
                head_backward(model, cache, grads, g_logits=g)
        if s.quad_target is not None and weights.lambda_T > 0:
            feats = s.quad_target.feats
            if s.union is not None:
                feats = feature_mix(s.quad_source.feats, s.quad_target.feats, s.union, model.psi)
            loss, cache, g = _ce_term(model, s.quad_target, weights.lambda_T / bsz, grads, feats=feats)
            l_quad += loss
            if grads is not None:
                g_feats = head_backward(model, cache, grads, g_logits=g, need_input_grad=s.union is not None)
                if s.union is not None:
                    _psi_backward(s, g_feats, grads)

    # aggregated feature alignment
    l_agg, cats = 0.0, ()
    if weights.lambda_f > 0 and all(s.agg_source and s.agg_target for s in samples) and samples:
        src_br = [_Branch(model, s.agg_source) for s in samples]
        tgt_br = [_Branch(model, s.agg_target) for s in samples]
        common = common_categories([b.bank for b in src_br], [b.bank for b in tgt_br])
        if len(common):
            cats = tuple(int(k) for k in common)
            x = np.stack([b.bank.vectors[common].ravel() for b in src_br])
            y = np.stack([b.bank.vectors[common].ravel() for b in tgt_br])
            l_agg, gx, gy = _mmd_grad(x, y, agg_cfg, weights.lambda_f)
            if grads is not None:
                c = x.shape[1] // len(common)
                for br, gi in [(b, gx[i]) for i, b in enumerate(src_br)] + [(b, gy[i]) for i, b in enumerate(tgt_br)]:
                    g_vec = np.zeros_like(br.bank.vectors)
                    g_vec[common] = gi.reshape(len(common), c)
                    br.backward(model, g_vec, grads)

    return Objective(l_quad, l_agg, l_ssl, grads, cats)


def _psi_backward(s: SampleInputs, g_out: np.ndarray, grads) -> None:
    t, c, h, w = s.quad_target.feats.shape
    m = resize_bilinear(s.union.astype(np.float64), (h, w))[:, None]
    z = np.concatenate([s.quad_source.feats * m, s.quad_target.feats * m], axis=1)
    grads["psi.weight"] += np.einsum("tohw,tchw->oc", g_out, z)


# --------------------------------------------------------------------------
# named loss terms


def quadmix_loss(model: ToyModel, bundle_s: MixBundle, bundle_t: MixBundle, w: LossWeights,
                 union: np.ndarray | None = None, augmented_target_frames: np.ndarray | None = None) -> float:
    """CE(G(S'), y_S') + lambda_T * CE(G(A(T')), y_T').

    ``augmented_target_frames`` are A(frames of T'); pass them explicitly so
    the caller controls the augmentation draw.
    """
    check_quad_tags(bundle_s, bundle_t)
    qs = StreamInput.from_bundle(bundle_s)
    frames_t = bundle_t.frames if augmented_target_frames is None else augmented_target_frames
    qt = StreamInput.from_frames(frames_t, bundle_t.flow, bundle_t.label)
    # the SSL slot is required by SampleInputs; give it an all-ignore stream
    dummy = StreamInput(qs.feats, qs.flow, bundle_s.label.with_values(
        np.full(bundle_s.label.shape, bundle_s.label.ignore_value, dtype=np.uint16)))
    obj = compute_objective(model, [SampleInputs(dummy, quad_source=qs, quad_target=qt, union=union)],
                            LossWeights(w.lambda_T, 0.0), with_grad=False)
    return obj.quadmix


def ssl_loss(model: ToyModel, source: StreamInput, target: StreamInput | None, w: LossWeights) -> float:
    """CE on raw source with truth labels + lambda_T * CE on augmented target with pseudo-labels."""
    obj = compute_objective(model, [SampleInputs(source, ssl_target=target)],
                            LossWeights(w.lambda_T, 0.0), with_grad=False)
    return obj.ssl
