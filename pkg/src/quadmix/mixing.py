"""Category-aware patch templates and quad-directional mixing.

A template carries frames, (pseudo-)labels and flow restricted to a set of
categories.  Mixing pastes a template over a base sample: template content
wins inside its mask, the base is kept elsewhere.  The same code handles
video (T = 2, with flow) and images (T = 1, flow is None).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import CategoryError, PolicyError, ShapeError
from .flow_ops import FusionParams
from .tensor_io import IGNORE, LabelMap, check_flow, check_frames

SOURCE, TARGET = "S", "T"

# (base tag, template domain) -> mixed tag
_TAGS = {
    ("S", "S"): "S→S",
    ("T", "T"): "T→T",
    ("S→S", "T"): "T→(S→S)",
    ("T→T", "S"): "S→(T→T)",
    # one-way pastes, only used for ablation experiments
    ("T", "S"): "S→T",
    ("S", "T"): "T→S",
}


@dataclass(frozen=True)
class MixBundle:
    frames: np.ndarray          # T x C x H x W
    label: LabelMap             # labels of frame t
    flow: np.ndarray | None     # H x W x 2, None in image mode
    provenance: np.ndarray      # T x H x W uint8, 1 where a template was pasted
    tag: str

    @classmethod
    def from_sample(cls, frames: np.ndarray, label: LabelMap, flow: np.ndarray | None,
                    domain: str) -> "MixBundle":
        frames = check_frames(frames)
        if flow is not None:
            check_flow(flow, frames.shape[2:])
        if label.shape != frames.shape[2:]:
            raise ShapeError(f"label {label.shape} does not match frames {frames.shape[2:]}")
        prov = np.zeros((frames.shape[0],) + frames.shape[2:], dtype=np.uint8)
        return cls(frames, label, flow, prov, domain)

    @property
    def video(self) -> bool:
        return self.flow is not None


@dataclass(frozen=True)
class PatchTemplate:
    frames: np.ndarray          # zero outside the mask
    label: LabelMap             # IGNORE outside m_t
    flow: np.ndarray | None     # zero outside m_{t-1}
    mask_stack: np.ndarray      # T x H x W uint8: {m_{t-1}, m_t} or {m_t}
    categories: tuple[int, ...]
    source_domain: str

    @property
    def mask_t(self) -> np.ndarray:
        return self.mask_stack[-1]

    @property
    def mask_prev(self) -> np.ndarray:
        return self.mask_stack[0]

    @property
    def empty(self) -> bool:
        return not self.mask_stack.any()


def category_mask(label: LabelMap, categories: Sequence[int]) -> np.ndarray:
    """1 where the label is one of ``categories``; IGNORE never matches."""
    cats = np.asarray(sorted(set(categories)), dtype=np.uint16)
    return np.isin(label.values, cats).astype(np.uint8)


def extract_template(frames: np.ndarray, label: LabelMap, flow: np.ndarray | None,
                     label_prev: LabelMap | None, categories: Sequence[int],
                     domain: str) -> PatchTemplate:
    """Cut the pixels of ``categories`` out of a (filtered) sample.

    ``label`` belongs to frame t; ``label_prev`` to frame t-1 and is required
    in video mode, where it also masks the flow.
    """
    frames = check_frames(frames)
    if not categories:
        raise CategoryError("template needs at least one category")
    bad = [k for k in categories if not 0 <= k < label.num_categories]
    if bad:
        raise CategoryError(f"categories {bad} outside label space of size {label.num_categories}")
    video = frames.shape[0] == 2
    if video and (flow is None or label_prev is None):
        raise ShapeError("video templates need flow and the previous-frame labels")
    m_t = category_mask(label, categories)
    if video:
        check_flow(flow, frames.shape[2:])
        if label_prev.shape != label.shape:
            raise ShapeError("label_prev does not match label")
        m_prev = category_mask(label_prev, categories)
        masks = np.stack([m_prev, m_t])
        t_flow = np.where(m_prev[..., None] == 1, flow, 0).astype(flow.dtype)
    else:
        masks = m_t[None]
        t_flow = None
    t_frames = np.where(masks[:, None] == 1, frames, 0).astype(frames.dtype)
    t_label = label.with_values(np.where(m_t == 1, label.values, IGNORE))
    return PatchTemplate(t_frames, t_label, t_flow, masks, tuple(categories), domain)


def empty_template(like: MixBundle, domain: str) -> PatchTemplate:
    """Template with an all-zero mask (iteration-0 bootstrap)."""
    masks = np.zeros_like(like.provenance)
    label = like.label.with_values(np.full(like.label.shape, IGNORE, dtype=np.uint16))
    flow = None if like.flow is None else np.zeros_like(like.flow)
    return PatchTemplate(np.zeros_like(like.frames), label, flow, masks, (), domain)


def mixed_tag(base_tag: str, template_domain: str) -> str:
    try:
        return _TAGS[(base_tag, template_domain)]
    except KeyError:
        raise PolicyError(f"no mixing direction for base {base_tag!r} with a {template_domain!r} template") from None


def mix(base: MixBundle, template: PatchTemplate) -> MixBundle:
    """Paste ``template`` over ``base``: Z' = Z* + Z * (1 - M*)."""
    if base.frames.shape != template.frames.shape:
        raise ShapeError(f"frames {base.frames.shape} vs template {template.frames.shape}")
    if base.label.num_categories != template.label.num_categories:
        raise CategoryError(
            f"label spaces differ: {base.label.num_categories} vs {template.label.num_categories}")
    if (base.flow is None) != (template.flow is None):
        raise ShapeError("base and template must both carry flow (video) or neither (image)")
    tag = mixed_tag(base.tag, template.source_domain)
    masks = template.mask_stack
    frames = np.where(masks[:, None] == 1, template.frames, base.frames)
    label = base.label.with_values(np.where(template.mask_t == 1, template.label.values, base.label.values))
    flow = None
    if base.flow is not None:
        flow = np.where(template.mask_prev[..., None] == 1, template.flow, base.flow)
    provenance = base.provenance | masks
    return MixBundle(frames, label, flow, provenance, tag)


@dataclass(frozen=True)
class QuadMixResult:
    inter_source: MixBundle     # T→(S→S)
    inter_target: MixBundle     # S→(T→T)
    union: np.ndarray           # T x H x W uint8
    intra_source: MixBundle     # S→S, not trained on
    intra_target: MixBundle     # T→T, not trained on


def quadmix_step(src: MixBundle, tgt: MixBundle, src_tmpl: PatchTemplate,
                 tgt_tmpl: PatchTemplate) -> QuadMixResult:
    """Intra-domain then inter-domain mixing; returns both quad-mixed bundles."""
    overlap = set(src_tmpl.categories) & set(tgt_tmpl.categories)
    if overlap:
        raise PolicyError(f"source and target templates share categories {sorted(overlap)}")
    if src.tag != SOURCE or tgt.tag != TARGET:
        raise PolicyError(f"quadmix_step expects raw S and T samples, got {src.tag!r}, {tgt.tag!r}")
    s_s = mix(src, src_tmpl)
    t_t = mix(tgt, tgt_tmpl)
    return QuadMixResult(mix(s_s, tgt_tmpl), mix(t_t, src_tmpl), union_mask(src_tmpl, tgt_tmpl), s_s, t_t)


def union_mask(a: PatchTemplate, b: PatchTemplate) -> np.ndarray:
    return (a.mask_stack | b.mask_stack).astype(np.uint8)


# --------------------------------------------------------------------------
# feature-level template mixing


def resize_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes with half-pixel-centre bilinear sampling."""
    h, w = x.shape[-2:]
    oh, ow = size
    if (oh, ow) == (h, w):
        return x.astype(np.float64)

    def axis(n_in, n_out):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    y0, y1, wy = axis(h, oh)
    x0, x1, wx = axis(w, ow)
    x = x.astype(np.float64)
    top = x[..., y0, :][..., x0] * (1 - wx) + x[..., y0, :][..., x1] * wx
    bot = x[..., y1, :][..., x0] * (1 - wx) + x[..., y1, :][..., x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def feature_mix(f_inter_src: np.ndarray, f_inter_tgt: np.ndarray, union: np.ndarray,
                psi: FusionParams) -> np.ndarray:
    """Fuse masked source-side features into the target-side feature stack.

    out = psi(Fs * M, Ft * M) + Ft * (1 - M), with M the union mask resized
    (softly) to the feature resolution.
    """
    if f_inter_src.shape != f_inter_tgt.shape or f_inter_tgt.ndim != 4:
        raise ShapeError(f"feature stacks differ: {f_inter_src.shape} vs {f_inter_tgt.shape}")
    t, c, h, w = f_inter_tgt.shape
    union = np.asarray(union)
    if union.shape[0] != t or union.shape[1] < h or union.shape[2] < w:
        raise ShapeError(f"union mask {union.shape} incompatible with features {f_inter_tgt.shape}")
    if psi.channels != c:
        raise ShapeError(f"psi maps {2 * psi.channels} -> {psi.channels}, features have {c} channels")
    m = resize_bilinear(union.astype(np.float64), (h, w))[:, None]
    z = np.concatenate([f_inter_src * m, f_inter_tgt * m], axis=1)          # T x 2C x h x w
    mixed = np.einsum("oc,tchw->tohw", psi.weight, z) + psi.bias[None, :, None, None]
    return mixed + f_inter_tgt * (1.0 - m)
