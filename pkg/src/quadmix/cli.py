"""Command-line entry point: ``quadmix <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/format/config error, 3 training
divergence.  Every command writes under ``--out`` and persists the resolved
configuration there as ``config.json``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aggregation import entropy_weights, mmd_align, spatial_aggregate, temporal_aggregate
from .bench import run_benchmark
from .config import RunConfig
from .errors import QuadMixError, TrainingError
from .flow_ops import FusionParams, generate_pseudo_label, warp_bilinear
from .mixing import MixBundle, PatchTemplate, extract_template, quadmix_step
from .model import ToyModel
from .shiftworld import ShiftWorld, generate, load, save
from .tensor_io import IGNORE, LabelMap, emit_image, read_tensor, write_tensor
from .train import Trainer, evaluate_miou

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# shared helpers


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config).with_overrides(args.seed, args.mode)
    return cfg


def _persist_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(cfg.dumps())


def _read(path: str | Path) -> np.ndarray:
    return read_tensor(Path(path))


def _world(cfg: RunConfig) -> ShiftWorld:
    return load(cfg.io.dataset) if cfg.io.dataset else generate(cfg.dataset)


def save_model(model: ToyModel, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    parts = {"fusion_weight": model.fusion.weight, "fusion_bias": model.fusion.bias,
             "classifier_weight": model.classifier_weight, "classifier_bias": model.classifier_bias,
             "psi_weight": model.psi.weight, "psi_bias": model.psi.bias}
    for name, arr in parts.items():
        write_tensor(np.asarray(arr, dtype=np.float32), out / f"{name}.qtns")


def load_model(path: str | Path) -> ToyModel:
    d = Path(path)
    p = {n: np.asarray(_read(d / f"{n}.qtns"), dtype=np.float64)
         for n in ("fusion_weight", "fusion_bias", "classifier_weight", "classifier_bias", "psi_weight", "psi_bias")}
    return ToyModel(FusionParams(p["fusion_weight"], p["fusion_bias"]), p["classifier_weight"],
                    p["classifier_bias"], FusionParams(p["psi_weight"], p["psi_bias"]))


class SampleSpec:
    """A mixing input: a sample directory or ``CLIP_DIR:t`` (frame t of a stored clip).

    Sample directories hold ``frames.qtns`` (T x C x H x W), ``label.qtns``
    and, in video mode, ``flow.qtns`` plus optionally ``label_prev.qtns``.
    """

    def __init__(self, spec: str, num_categories: int, video: bool):
        path, _, frame = spec.rpartition(":") if ":" in spec else (spec, "", "")
        self.path = Path(path)
        if frame:
            t = int(frame)
            frames = _read(self.path / "frames.qtns")
            labels = _read(self.path / "labels.qtns")
            if not 0 <= t < frames.shape[0] or (video and t < 1):
                raise QuadMixError(f"{spec}: frame index {t} out of range")
            if video:
                flows = _read(self.path / "flows.qtns")
                self.frames, self.flow = frames[t - 1:t + 1], flows[t - 1]
                self.label_prev = LabelMap(labels[t - 1], num_categories)
            else:
                self.frames, self.flow, self.label_prev = frames[t:t + 1], None, None
            self.label = LabelMap(labels[t], num_categories)
        else:
            self.frames = _read(self.path / "frames.qtns")
            self.label = LabelMap(_read(self.path / "label.qtns"), num_categories)
            has_flow = (self.path / "flow.qtns").exists()
            self.flow = _read(self.path / "flow.qtns") if video and has_flow else None
            prev = self.path / "label_prev.qtns"
            self.label_prev = LabelMap(_read(prev), num_categories) if prev.exists() else self.label
            if video and self.flow is None:
                raise QuadMixError(f"{spec}: video mode needs flow.qtns")
            if not video:
                self.frames = self.frames[-1:]

    def bundle(self, domain: str) -> MixBundle:
        return MixBundle.from_sample(self.frames, self.label, self.flow, domain)

    def template(self, categories, domain: str) -> PatchTemplate:
        return extract_template(self.frames, self.label, self.flow, self.label_prev, categories, domain)


def write_bundle(b: MixBundle, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(b.frames, out / "frames.qtns")
    write_tensor(b.label.values, out / "label.qtns")
    write_tensor(b.provenance, out / "provenance.qtns")
    (out / "tag.txt").write_text(b.tag + "\n", encoding="utf-8")
    if b.flow is not None:
        write_tensor(b.flow, out / "flow.qtns")
        emit_image(b.flow, out / "flow.ppm", kind="flow")
    for i, frame in enumerate(b.frames):
        emit_image(frame, out / f"frame{i}.ppm", kind="frame")
    emit_image(b.label, out / "label.ppm")


def _ids(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated category ids, got {text!r}") from None


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _out(args)
    save(generate(cfg.dataset), out)
    _persist_config(cfg, out)
    return EXIT_OK


def cmd_mix(args) -> int:
    cfg = _config(args)
    out = _out(args)
    video = cfg.training.mode == "video"
    k = cfg.dataset.num_categories
    src = SampleSpec(args.source, k, video)
    tgt = SampleSpec(args.target, k, video)
    src_t = SampleSpec(args.source_template, k, video).template(_ids(args.source_categories), "S")
    tgt_t = SampleSpec(args.target_template, k, video).template(_ids(args.target_categories), "T")
    q = quadmix_step(src.bundle("S"), tgt.bundle("T"), src_t, tgt_t)
    write_bundle(q.inter_source, out / "inter_source")
    write_bundle(q.inter_target, out / "inter_target")
    if args.keep_intra:
        write_bundle(q.intra_source, out / "intra_source")
        write_bundle(q.intra_target, out / "intra_target")
    write_tensor(q.union, out / "union.qtns")
    _persist_config(cfg, out)
    return EXIT_OK


def cmd_pseudo(args) -> int:
    cfg = _config(args)
    out = _out(args)
    pcfg = cfg.mixing.pseudo()
    video = cfg.training.mode == "video"
    if args.logits:
        logits = _read(args.logits)
        flow = _read(args.flow) if args.flow and video else None
    elif args.model and args.clip is not None:
        model = load_model(args.model)
        spec_dir, t = Path(args.clip), args.frame
        frames = _read(spec_dir / "frames.qtns")
        flows = _read(spec_dir / "flows.qtns") if video else None
        src = t - pcfg.tau if video else t
        if src < 0 or t >= frames.shape[0]:
            raise QuadMixError(f"frame {t} has no frame {src} to predict from")
        if video and src >= 1:
            logits = model.predict_logits(frames[src - 1:src + 1], flows[src - 1])
        else:
            logits = model.predict_logits(frames[src:src + 1], None)
        # chain the one-step flows src -> t (exact for the stored integer motion)
        flow = None
        if video:
            flow = np.zeros(frames.shape[2:] + (2,), dtype=np.float32)
            for s in range(src + 1, t + 1):
                step = flows[s - 1]
                flow = (step + warp_bilinear(flow.transpose(2, 0, 1), step).transpose(1, 2, 0)).astype(np.float32)
        write_tensor(np.asarray(logits, dtype=np.float32), out / "logits.qtns")
    else:
        raise UsageError("pseudo needs --logits or --model with --clip")
    label = generate_pseudo_label(logits, flow, pcfg)
    write_tensor(label.values, out / "pseudo_label.qtns")
    emit_image(label, out / "pseudo_label.ppm")
    n_ignore = int((label.values == IGNORE).sum())
    (out / "pseudo_label.txt").write_text(
        f"pixels {label.values.size}\nignored {n_ignore}\nthreshold {pcfg.confidence_threshold}\n")
    _persist_config(cfg, out)
    return EXIT_OK


def _bank(features: list[str], labels: list[str], logits: list[str] | None, k: int):
    if len(features) != len(labels) or (logits and len(logits) != len(features)):
        raise UsageError("need one label map (and one logits file, if any) per feature file")
    banks = [spatial_aggregate(np.asarray(_read(f), dtype=np.float64), LabelMap(_read(l), k))
             for f, l in zip(features, labels)]
    weights = entropy_weights([_read(z) for z in logits]) if logits else np.full(len(banks), 1.0 / len(banks))
    return temporal_aggregate(banks, weights), weights


def cmd_aggregate(args) -> int:
    cfg = _config(args)
    out = _out(args)
    k = cfg.dataset.num_categories
    sb, sw = _bank(args.source_features, args.source_labels, args.source_logits, k)
    tb, tw = _bank(args.target_features, args.target_labels, args.target_logits, k)
    res = mmd_align(sb, tb, cfg.aggregation)
    for name, bank in (("source", sb), ("target", tb)):
        write_tensor(bank.vectors.astype(np.float32), out / f"{name}_bank.qtns")
        write_tensor(bank.valid.astype(np.uint8), out / f"{name}_valid.qtns")
    write_tensor(sw.astype(np.float32), out / "source_weights.qtns")
    write_tensor(tw.astype(np.float32), out / "target_weights.qtns")
    (out / "alignment.txt").write_text(
        f"loss {res.loss:.9g}\ncategories {' '.join(map(str, res.categories))}\n"
        f"no_overlap {str(res.no_overlap).lower()}\n")
    _persist_config(cfg, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    _persist_config(cfg, out)
    if cfg.bench.variants:
        report = run_benchmark(cfg, cfg.bench.variants, cfg.bench.seeds, cfg.bench.consistency,
                               progress=lambda m: print(m, file=sys.stderr))
        (out / f"{cfg.io.report}.csv").write_text(report.to_csv())
        (out / f"{cfg.io.report}.txt").write_text(report.to_text())
        sys.stdout.write(report.to_text())
        return EXIT_OK
    world = _world(cfg)
    tcfg = cfg.training
    result = Trainer(world.source, world.target, tcfg, cfg.mixing, cfg.augment, cfg.aggregation,
                     eval_clips=world.target_test).run()
    save_model(result.model, out / "model")
    (out / cfg.io.trace).write_text(result.trace_csv())
    _write_metrics(evaluate_miou(result.model, world.target_test, tcfg.mode), out)
    return EXIT_OK


def _write_metrics(res, out: Path) -> None:
    doc = {"mIoU": round(res.miou, 6),
           "IoU": [None if np.isnan(x) else round(float(x), 6) for x in res.iou]}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"target mIoU {res.miou:.4f}")


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args)
    world = _world(cfg)
    clips = {"target": world.target_test, "source": world.source_test}[args.split]
    _write_metrics(evaluate_miou(load_model(args.model), clips, cfg.training.mode), out)
    _persist_config(cfg, out)
    return EXIT_OK


VIZ_KINDS = ("frame", "labels", "flow")


def cmd_viz(args) -> int:
    cfg = _config(args)
    out = _out(args)
    src = Path(args.input)
    files = sorted(src.glob("*.qtns")) if src.is_dir() else [src]
    written = 0
    for f in files:
        arr = _read(f)
        kind = args.kind or _guess_kind(f.stem, arr)
        if kind is None:
            continue
        for i, item in enumerate(_viz_items(arr, kind, cfg.dataset.num_categories)):
            suffix = f"_{i}" if i else ""
            emit_image(item, out / f"{f.stem}{suffix}.ppm", kind=kind)
            written += 1
    if not written:
        raise QuadMixError(f"nothing to render under {src}")
    return EXIT_OK


def _guess_kind(stem: str, arr: np.ndarray) -> str | None:
    if arr.dtype == np.uint16:
        return "labels"
    if "flow" in stem and arr.shape[-1] == 2:
        return "flow"
    if arr.dtype == np.float32 and arr.ndim >= 3 and arr.shape[-3] in (1, 3):
        return "frame"
    return None


def _viz_items(arr: np.ndarray, kind: str, k: int):
    """Split leading axes so every item is one frame / label map / flow field."""
    core = {"frame": 3, "labels": 2, "flow": 3}[kind]
    flat = arr.reshape((-1,) + arr.shape[arr.ndim - core:]) if arr.ndim > core else arr[None]
    for item in flat:
        if kind == "labels":
            yield LabelMap(item, max(k, int(item[item != IGNORE].max(initial=0)) + 1))
        else:
            yield item


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides dataset and training seeds")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--mode", choices=("video", "image"), help="overrides training.mode")

    p = _Parser(prog="quadmix", description="QuadMix domain-adaptation pipeline on ShiftWorld")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="generate a ShiftWorld dataset")

    m = sub.add_parser("mix", parents=[common], help="quad-directional mixing of two samples")
    m.add_argument("--source", required=True, help="sample dir or CLIP_DIR:t")
    m.add_argument("--target", required=True)
    m.add_argument("--source-template", required=True, help="sample the source template is cut from")
    m.add_argument("--target-template", required=True)
    m.add_argument("--source-categories", required=True, help="comma-separated ids")
    m.add_argument("--target-categories", required=True)
    m.add_argument("--keep-intra", action="store_true", help="also write the intra-mixed samples")

    ps = sub.add_parser("pseudo", parents=[common], help="flow-guided pseudo-labels")
    ps.add_argument("--logits", help="K x H x W logits of frame t - tau")
    ps.add_argument("--flow", help="H x W x 2 flow from frame t - tau to t")
    ps.add_argument("--model", help="trained model directory")
    ps.add_argument("--clip", help="clip directory (with --model)")
    ps.add_argument("--frame", type=int, default=1, help="frame t to label (with --model)")

    a = sub.add_parser("aggregate", parents=[common], help="category feature banks and alignment loss")
    for side in ("source", "target"):
        a.add_argument(f"--{side}-features", nargs="+", required=True, help="C x H x W fused features per timestep")
        a.add_argument(f"--{side}-labels", nargs="+", required=True, help="label map per timestep")
        a.add_argument(f"--{side}-logits", nargs="+", help="K x H x W logits per timestep (entropy weights)")

    sub.add_parser("train", parents=[common], help="train one variant, or run the benchmark")

    e = sub.add_parser("eval", parents=[common], help="mIoU of a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("target", "source"), default="target")

    v = sub.add_parser("viz", parents=[common], help="PPM previews of QTNS tensors")
    v.add_argument("--input", required=True, help="QTNS file or directory (e.g. a mixed bundle)")
    v.add_argument("--kind", choices=VIZ_KINDS)
    return p


COMMANDS = {"gen": cmd_gen, "mix": cmd_mix, "pseudo": cmd_pseudo, "aggregate": cmd_aggregate,
            "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (QuadMixError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
