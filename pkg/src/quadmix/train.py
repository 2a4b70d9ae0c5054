"""End-to-end training loop, evaluation and pseudo-label consistency metrics.

One iteration: build pseudo-labels with the current model, cut templates out
of the previous iteration's samples, quad-mix, augment the target side,
evaluate L_all with its analytic gradient and take an SGD step.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import AggregationConfig
from .errors import ConfigError, TrainingError
from .flow_ops import PseudoLabelConfig, generate_pseudo_label, softmax, warp_labels
from .losses import LossWeights, Objective, SampleInputs, StreamInput, compute_objective
from .mixing import (SOURCE, TARGET, MixBundle, PatchTemplate, empty_template, extract_template,
                     quadmix_step)
from .model import ToyModel, extract_features, head_forward
from .rng import AugmentConfig, CategoryPolicy, Rng, augment, pick_categories
from .shiftworld import DIVISION, LONG_TAIL, Clip
from .tensor_io import IGNORE, LabelMap

VARIANTS = {
    # name: (target self-training, pixel-level templates, feature-level templates, aggregation)
    "source_only": (False, False, False, False),
    "self_training": (True, False, False, False),
    "+V-template": (True, True, False, False),
    "+F-template": (True, True, True, False),
    "+Agg": (True, False, False, True),
    "full": (True, True, True, True),
}


@dataclass
class MixingConfig:
    pool: str = "things"
    picks_per_iteration: int = 1
    long_tail: list[int] = field(default_factory=lambda: list(LONG_TAIL))
    max_long_tail: int = 2
    include_long_tail: bool = True
    confidence_threshold: float = 0.9
    tau: int = 1

    def policy(self, num_categories: int) -> CategoryPolicy:
        return CategoryPolicy(list(range(num_categories)), self.pool,
                              {k: list(v) for k, v in DIVISION.items()},
                              list(self.long_tail), self.picks_per_iteration, self.max_long_tail)

    def pseudo(self) -> PseudoLabelConfig:
        return PseudoLabelConfig(self.tau, self.confidence_threshold)


@dataclass
class TrainConfig:
    iterations: int = 500
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_T: float = 0.2
    batch_size: int = 1
    variant: str = "full"
    mode: str = "video"
    grad_clip: float | None = 1.0    # global gradient-norm cap, None disables
    init_scale: float = 0.01
    eval_every: int = 0
    eval_clips: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.mode not in ("video", "image"):
            raise ConfigError(f"mode must be 'video' or 'image', got {self.mode!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("need iterations >= 0, batch_size >= 1, lr > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError("need 0 <= momentum < 1 and weight_decay >= 0")


# --------------------------------------------------------------------------
# per-clip model outputs


class FeatureCache:
    """Per-frame features of raw clip frames (features are not learned)."""

    def __init__(self):
        self._store: dict[tuple[int, int], np.ndarray] = {}

    def frame(self, clip: Clip, t: int) -> np.ndarray:
        key = (id(clip), t)
        if key not in self._store:
            self._store[key] = extract_features(clip.frames[t:t + 1])[0]
        return self._store[key]

    def stack(self, clip: Clip, times: Sequence[int]) -> np.ndarray:
        return np.stack([self.frame(clip, t) for t in times])

    def clear(self) -> None:
        self._store.clear()


class ClipView:
    """Lazily computed logits of one clip under a fixed model."""

    def __init__(self, model: ToyModel, clip: Clip, video: bool, cache: FeatureCache | None = None):
        self.model, self.clip, self.video = model, clip, video
        self.cache = cache or FeatureCache()
        self._logits: dict[int, np.ndarray] = {}

    def stack(self, t: int) -> tuple[np.ndarray, np.ndarray | None]:
        """Feature stack and flow used to predict frame t."""
        if self.video and t >= 1:
            return self.cache.stack(self.clip, (t - 1, t)), self.clip.flow(t - 1, t)
        return self.cache.stack(self.clip, (t,)), None

    def logits(self, t: int) -> np.ndarray:
        if t not in self._logits:
            _, self._logits[t], _ = head_forward(self.model, *self.stack(t))
        return self._logits[t]

    def pseudo_label(self, t: int, cfg: PseudoLabelConfig, warp: bool = True) -> LabelMap:
        """Pseudo-label of frame t; from frame t - tau (video) or t itself (image)."""
        if not self.video:
            return generate_pseudo_label(self.logits(t), None, cfg)
        src = t - cfg.tau
        flow = self.clip.flow(src, t) if warp else None
        return generate_pseudo_label(self.logits(src), flow, cfg)


@dataclass
class Sample:
    """A raw training sample plus what the template buffer needs from it."""

    clip: Clip
    t: int
    frames: np.ndarray
    flow: np.ndarray | None
    label: LabelMap
    label_prev: LabelMap | None
    domain: str

    def bundle(self) -> MixBundle:
        return MixBundle.from_sample(self.frames, self.label, self.flow, self.domain)

    def template(self, categories: Sequence[int]) -> PatchTemplate:
        return extract_template(self.frames, self.label, self.flow, self.label_prev, categories, self.domain)


# --------------------------------------------------------------------------
# trainer


@dataclass
class TraceRow:
    iteration: int
    l_quadmix: float
    l_agg: float
    l_ssl: float
    l_all: float
    target_miou: float | None = None


@dataclass
class TrainResult:
    model: ToyModel
    trace: list[TraceRow]

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "L_QuadMix", "L_Agg", "L_SSL", "L_all", "target_mIoU"])
        for r in self.trace:
            miou = "" if r.target_miou is None else f"{r.target_miou:.6f}"
            w.writerow([r.iteration, f"{r.l_quadmix:.6f}", f"{r.l_agg:.6f}", f"{r.l_ssl:.6f}",
                        f"{r.l_all:.6f}", miou])
        return buf.getvalue()


class Trainer:
    def __init__(self, source: Sequence[Clip], target: Sequence[Clip], cfg: TrainConfig,
                 mixing: MixingConfig | None = None, augment_cfg: AugmentConfig | None = None,
                 agg_cfg: AggregationConfig | None = None, eval_clips: Sequence[Clip] = (),
                 model: ToyModel | None = None):
        if not source or not target:
            raise ConfigError("training needs clips from both domains")
        self.source, self.target, self.cfg = list(source), list(target), cfg
        self.mixing = mixing or MixingConfig()
        self.augment_cfg = augment_cfg or AugmentConfig()
        self.agg_cfg = agg_cfg or AggregationConfig.for_tau(self.mixing.tau)
        self.eval_clips = list(eval_clips)[:cfg.eval_clips]
        self.video = cfg.mode == "video"
        self.num_categories = source[0].num_categories
        self.policy = self.mixing.policy(self.num_categories)
        self.pseudo_cfg = self.mixing.pseudo()
        self.use_ssl_t, self.use_vt, self.use_ft, self.use_agg = VARIANTS[cfg.variant]
        self.weights = LossWeights(cfg.lambda_T, self.agg_cfg.lambda_f if self.use_agg else 0.0)
        self.rng = Rng(cfg.seed)
        self.model = model.copy() if model is not None else ToyModel.init(
            self.num_categories, self.rng.fork(), cfg.init_scale)
        self.velocity = {k: np.zeros_like(v) for k, v in self.model.params().items()}
        self.buffers: list[tuple[Sample, Sample] | None] = [None] * cfg.batch_size
        self.cache = FeatureCache()
        length = source[0].length
        # earliest frame with every temporal input available
        self.t_min = 0 if not self.video else max(max(self.agg_cfg.target_offsets),
                                                  max(self.agg_cfg.source_offsets), self.mixing.tau + 1)
        if self.t_min >= length:
            raise ConfigError(f"clips of length {length} too short for tau={self.mixing.tau} "
                              f"and offsets {self.agg_cfg.target_offsets}")

    # ---- sampling

    def _draw(self, clips: list[Clip]) -> tuple[Clip, int]:
        clip = clips[self.rng.below(len(clips))]
        return clip, self.rng.integers(self.t_min, clip.length - 1)

    def _source_sample(self, clip: Clip, t: int) -> Sample:
        if self.video:
            return Sample(clip, t, clip.frames[t - 1:t + 1], clip.flow(t - 1, t), clip.label(t),
                          clip.label(t - 1), SOURCE)
        return Sample(clip, t, clip.frames[t:t + 1], None, clip.label(t), None, SOURCE)

    def _target_sample(self, view: ClipView, t: int) -> Sample:
        clip = view.clip
        if self.video:
            return Sample(clip, t, clip.frames[t - 1:t + 1], clip.flow(t - 1, t),
                          view.pseudo_label(t, self.pseudo_cfg),
                          view.pseudo_label(t - 1, self.pseudo_cfg) if t - 1 >= self.mixing.tau else
                          generate_pseudo_label(view.logits(t - 1), None, self.pseudo_cfg), TARGET)
        return Sample(clip, t, clip.frames[t:t + 1], None, view.pseudo_label(t, self.pseudo_cfg), None, TARGET)

    def _raw_feats(self, clip: Clip, t: int) -> np.ndarray:
        return self.cache.stack(clip, (t - 1, t) if self.video else (t,))

    def _agg_streams(self, clip: Clip, t: int, labels_for, offsets) -> list[StreamInput]:
        if not self.video:
            return [StreamInput(self.cache.stack(clip, (t,)), None, labels_for(t, t))]
        return [StreamInput(self.cache.stack(clip, (t - off, t)), clip.flow(t - off, t), labels_for(t - off, t))
                for off in offsets]

    def _prepare(self, slot: int) -> SampleInputs:
        src_clip, ts = self._draw(self.source)
        tgt_clip, tt = self._draw(self.target)
        view = ClipView(self.model, tgt_clip, self.video, self.cache)
        s = self._source_sample(src_clip, ts)
        tg = self._target_sample(view, tt)
        inputs = SampleInputs(StreamInput(self._raw_feats(src_clip, ts), s.flow, s.label))

        if self.use_ssl_t:
            inputs.ssl_target = StreamInput.from_frames(
                augment(self.rng, tg.frames, self.augment_cfg), tg.flow, tg.label)

        if self.use_vt:
            sb, tb = s.bundle(), tg.bundle()
            prev = self.buffers[slot]
            if prev is None:
                # iteration 0: nothing to paste yet, quad-mixed samples equal the raw ones
                src_t, tgt_t = empty_template(sb, SOURCE), empty_template(tb, TARGET)
            else:
                src_cats = pick_categories(self.rng, self.policy, include_long_tail=self.mixing.include_long_tail)
                tgt_cats = pick_categories(self.rng, self.policy, exclude=src_cats)
                src_t, tgt_t = prev[0].template(src_cats), prev[1].template(tgt_cats)
            q = quadmix_step(sb, tb, src_t, tgt_t)
            inputs.quad_source = StreamInput.from_bundle(q.inter_source)
            inputs.quad_target = StreamInput.from_frames(
                augment(self.rng, q.inter_target.frames, self.augment_cfg),
                q.inter_target.flow, q.inter_target.label)
            if self.use_ft:
                inputs.union = q.union
            self.buffers[slot] = (s, tg)

        if self.use_agg:
            inputs.agg_source = self._agg_streams(
                src_clip, ts, lambda tp, t: src_clip.label(t), self.agg_cfg.source_offsets)

            def target_labels(tp, t):
                if not self.video:
                    return view.pseudo_label(t, self.pseudo_cfg)
                return generate_pseudo_label(view.logits(tp), tgt_clip.flow(tp, t), self.pseudo_cfg)

            inputs.agg_target = self._agg_streams(tgt_clip, tt, target_labels, self.agg_cfg.target_offsets)
        return inputs

    # ---- optimisation

    def step(self, n: int) -> Objective:
        self.cache.clear()
        batch = [self._prepare(i) for i in range(self.cfg.batch_size)]
        obj = compute_objective(self.model, batch, self.weights, self.agg_cfg, with_grad=True)
        if not np.isfinite(obj.total) or not all(np.isfinite(g).all() for g in obj.grads.values()):
            raise TrainingError(n)
        cfg = self.cfg
        scale = 1.0
        if cfg.grad_clip is not None:
            norm = float(np.sqrt(sum((g * g).sum() for g in obj.grads.values())))
            scale = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
        for name, p in self.model.params().items():
            g = scale * obj.grads[name] + cfg.weight_decay * p
            v = self.velocity[name]
            v *= cfg.momentum
            v += g
            p -= cfg.lr * v
        if not self.model.all_finite():
            raise TrainingError(n, "parameters are not finite")
        return obj

    def run(self) -> TrainResult:
        trace = []
        for n in range(self.cfg.iterations):
            obj = self.step(n)
            miou = None
            last = n == self.cfg.iterations - 1
            if self.eval_clips and self.cfg.eval_every and ((n + 1) % self.cfg.eval_every == 0 or last):
                miou = evaluate_miou(self.model, self.eval_clips, self.cfg.mode).miou
            trace.append(TraceRow(n, obj.quadmix, obj.agg, obj.ssl, obj.total, miou))
        return TrainResult(self.model, trace)


def train(source: Sequence[Clip], target: Sequence[Clip], cfg: TrainConfig, **kw) -> TrainResult:
    """Train a fresh toy model; ``cfg.iterations == 0`` returns the initial model."""
    return Trainer(source, target, cfg, **kw).run()


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MIoUResult:
    iou: np.ndarray          # K, NaN for categories absent from the ground truth
    miou: float
    confusion: np.ndarray    # K x K, rows truth, columns prediction


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_categories: int) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.intp)
    truth = np.asarray(truth).ravel().astype(np.intp)
    keep = (truth < num_categories) & (truth != IGNORE)
    idx = truth[keep] * num_categories + np.minimum(pred[keep], num_categories - 1)
    return np.bincount(idx, minlength=num_categories ** 2).reshape(num_categories, num_categories)


def miou_from_confusion(conf: np.ndarray) -> MIoUResult:
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    present = conf.sum(axis=1) > 0
    iou = np.full(len(tp), np.nan)
    denom = tp + fp + fn
    iou[present] = tp[present] / denom[present]
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return MIoUResult(iou, miou, conf)


def miou(pred: np.ndarray, truth: np.ndarray, num_categories: int) -> MIoUResult:
    """IoU_k = TP / (TP + FP + FN); mean over categories present in the truth."""
    return miou_from_confusion(confusion_matrix(pred, truth, num_categories))


def evaluate_miou(model: ToyModel, clips: Sequence[Clip], mode: str = "video") -> MIoUResult:
    """Score every frame with a predecessor (video) or every frame (image)."""
    k = model.num_categories
    conf = np.zeros((k, k), dtype=np.int64)
    video = mode == "video"
    for clip in clips:
        view = ClipView(model, clip, video)
        for t in range(1 if video else 0, clip.length):
            pred = view.logits(t).argmax(axis=0)
            conf += confusion_matrix(pred, clip.labels[t], k)
    return miou_from_confusion(conf)


@dataclass(frozen=True)
class ConsistencyResult:
    rate: float          # agreement of y_t with warp_labels(y_{t-1}) over pixels labelled in both
    accuracy: float      # pseudo-label accuracy against ground truth over labelled pixels
    coverage: float      # fraction of pixels that survive the confidence filter
    pixels: int


def temporal_consistency(model: ToyModel, clips: Sequence[Clip], cfg: PseudoLabelConfig | None = None,
                         warp: bool = True) -> ConsistencyResult:
    """How stable the pseudo-labels are across consecutive frames.

    For each frame t with both t and t - 1 labelable, compares the pseudo-label
    of t with the pseudo-label of t - 1 carried forward by the ground-truth
    flow.  ``warp=False`` generates pseudo-labels without moving probabilities
    along the flow.
    """
    cfg = cfg or PseudoLabelConfig()
    agree = total = correct = labelled = seen = 0
    for clip in clips:
        view = ClipView(model, clip, True)
        for t in range(cfg.tau + 1, clip.length):
            cur = view.pseudo_label(t, cfg, warp)
            prev = warp_labels(view.pseudo_label(t - 1, cfg, warp), clip.flow(t - 1, t))
            both = (cur.values != IGNORE) & (prev.values != IGNORE)
            agree += int((cur.values[both] == prev.values[both]).sum())
            total += int(both.sum())
            has = cur.values != IGNORE
            correct += int((cur.values[has] == clip.labels[t][has]).sum())
            labelled += int(has.sum())
            seen += has.size
    return ConsistencyResult(agree / total if total else float("nan"),
                             correct / labelled if labelled else float("nan"),
                             labelled / seen if seen else 0.0, total)


def confident_fraction(model: ToyModel, clips: Sequence[Clip], threshold: float) -> float:
    """Share of evaluated pixels whose top class probability reaches ``threshold``."""
    hit = n = 0
    for clip in clips:
        view = ClipView(model, clip, True)
        for t in range(1, clip.length):
            p = softmax(view.logits(t), axis=0).max(axis=0)
            hit += int((p >= threshold).sum())
            n += p.size
    return hit / n if n else 0.0
