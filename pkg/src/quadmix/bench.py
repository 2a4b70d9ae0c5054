"""Adaptation benchmark on ShiftWorld: variants x seeds -> mIoU report."""
from __future__ import annotations

import csv
import dataclasses
import io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .errors import TrainingError
from .shiftworld import CATEGORIES, ShiftWorld, generate
from .train import Trainer, evaluate_miou, temporal_consistency


@dataclass
class BenchRow:
    variant: str
    seed: int
    miou: float
    iou: list[float]                 # NaN where the category is absent from the test truth
    consistency_warp: float | None = None
    consistency_nowarp: float | None = None
    pseudo_accuracy: float | None = None


@dataclass
class BenchReport:
    rows: list[BenchRow]
    variants: list[str]
    seeds: list[int]
    categories: Sequence[str] = CATEGORIES
    extra: dict = field(default_factory=dict)

    def by_variant(self, variant: str) -> list[BenchRow]:
        return [r for r in self.rows if r.variant == variant]

    def mious(self, variant: str) -> np.ndarray:
        return np.array([r.miou for r in self.by_variant(variant)])

    def mean(self, variant: str) -> float:
        return float(self.mious(variant).mean())

    def std(self, variant: str) -> float:
        return float(self.mious(variant).std())

    def wins(self, variant: str, baseline: str) -> int:
        a = {r.seed: r.miou for r in self.by_variant(variant)}
        b = {r.seed: r.miou for r in self.by_variant(baseline)}
        return sum(a[s] > b[s] for s in a if s in b)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "seed", "mIoU", *[f"IoU_{c}" for c in self.categories],
                    "consistency_warp", "consistency_nowarp", "pseudo_accuracy"])
        for r in self.rows:
            w.writerow([r.variant, r.seed, _fmt(r.miou), *[_fmt(x) for x in r.iou],
                        _fmt(r.consistency_warp), _fmt(r.consistency_nowarp), _fmt(r.pseudo_accuracy)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"target mIoU over seeds {self.seeds}", ""]
        head = f"{'variant':<14} {'mIoU mean':>9} {'std':>7}"
        lines.append(head + "".join(f" {c[:10]:>10}" for c in self.categories) + "  wins vs source_only")
        for v in self.variants:
            iou = np.array([r.iou for r in self.by_variant(v)], dtype=np.float64)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)   # category absent in every seed
                per_cat = np.nanmean(iou, axis=0) if len(iou) else []
            wins = f"{self.wins(v, 'source_only')}/{len(self.by_variant(v))}" \
                if "source_only" in self.variants and v != "source_only" else "-"
            lines.append(f"{v:<14} {self.mean(v):>9.4f} {self.std(v):>7.4f}"
                         + "".join(f" {x:>10.4f}" for x in per_cat) + f"  {wins}")
        cons = [r for r in self.rows if r.consistency_warp is not None]
        if cons:
            lines += ["", "pseudo-label temporal consistency on target test clips (mean over seeds)",
                      f"{'variant':<14} {'with warp':>10} {'no warp':>10} {'accuracy':>10}"]
            for v in self.variants:
                rs = [r for r in self.by_variant(v) if r.consistency_warp is not None]
                if rs:
                    lines.append(f"{v:<14} {np.mean([r.consistency_warp for r in rs]):>10.4f} "
                                 f"{np.mean([r.consistency_nowarp for r in rs]):>10.4f} "
                                 f"{np.mean([r.pseudo_accuracy for r in rs]):>10.4f}")
        return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if x is None:
        return ""
    return "nan" if np.isnan(x) else f"{x:.6f}"


def world_for_seed(cfg: RunConfig, seed: int) -> ShiftWorld:
    return generate(dataclasses.replace(cfg.dataset, seed=seed))


def run_benchmark(cfg: RunConfig, variants: Sequence[str], seeds: Sequence[int],
                  consistency: bool = True, progress: Callable[[str], None] | None = None,
                  worlds: dict[int, ShiftWorld] | None = None) -> BenchReport:
    """Train every variant on every seed and score it on the target test split.

    Each seed fixes both the generated dataset and the training stream, so
    variants sharing a seed see the same clips.
    """
    rows = []
    for seed in seeds:
        world = (worlds or {}).get(seed) or world_for_seed(cfg, seed)
        for variant in variants:
            tcfg = dataclasses.replace(cfg.training, variant=variant, seed=seed)
            try:
                model = Trainer(world.source, world.target, tcfg, cfg.mixing, cfg.augment,
                                cfg.aggregation).run().model
            except TrainingError as exc:
                raise TrainingError(exc.iteration, f"variant {variant} seed {seed}: {exc}") from exc
            res = evaluate_miou(model, world.target_test, tcfg.mode)
            row = BenchRow(variant, seed, res.miou, [float(x) for x in res.iou])
            if consistency and tcfg.mode == "video":
                pcfg = cfg.mixing.pseudo()
                warp = temporal_consistency(model, world.target_test, pcfg, warp=True)
                nowarp = temporal_consistency(model, world.target_test, pcfg, warp=False)
                row.consistency_warp, row.consistency_nowarp = warp.rate, nowarp.rate
                row.pseudo_accuracy = warp.accuracy
            rows.append(row)
            if progress:
                progress(f"seed {seed} {variant}: target mIoU {res.miou:.4f}")
    return BenchReport(rows, list(variants), list(seeds))
