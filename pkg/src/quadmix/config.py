"""JSON run configuration: one section per module, defaults everywhere.

Unknown keys are rejected, missing keys take the owning dataclass's default,
and :meth:`RunConfig.to_dict` gives the fully resolved document that every
command persists next to its outputs.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .aggregation import AggregationConfig
from .errors import ConfigError
from .rng import AugmentConfig
from .shiftworld import ShiftWorldConfig
from .train import VARIANTS, MixingConfig, TrainConfig


@dataclass
class IOConfig:
    dataset: str | None = None       # existing dataset directory; generated when unset
    trace: str = "trace.csv"
    report: str = "report"


@dataclass
class BenchConfig:
    variants: list[str] = field(default_factory=list)   # empty: single training run
    seeds: list[int] = field(default_factory=lambda: [0])
    consistency: bool = True

    def __post_init__(self):
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}; expected a subset of {sorted(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("bench needs at least one seed")


SECTIONS = {
    "dataset": ShiftWorldConfig,
    "mixing": MixingConfig,
    "augment": AugmentConfig,
    "aggregation": AggregationConfig,
    "training": TrainConfig,
    "io": IOConfig,
    "bench": BenchConfig,
}


def _build(cls, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        # JSON has no tuples; restore them where the dataclass expects one
        if isinstance(value, list) and isinstance(default, tuple):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {section!r}: {exc}") from None


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


@dataclass
class RunConfig:
    dataset: ShiftWorldConfig = field(default_factory=ShiftWorldConfig)
    mixing: MixingConfig = field(default_factory=MixingConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    io: IOConfig = field(default_factory=IOConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        parts = {name: _build(kind, d.get(name, {}), name) for name, kind in SECTIONS.items()}
        if "target_offsets" not in d.get("aggregation", {}):
            # the target timestep set follows tau unless given explicitly
            offsets = AggregationConfig.for_tau(parts["mixing"].tau).target_offsets
            parts["aggregation"] = dataclasses.replace(parts["aggregation"], target_offsets=offsets)
        return cls(**parts)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, seed: int | None = None, mode: str | None = None) -> "RunConfig":
        """Apply command-line flags, which take precedence over the file."""
        out = RunConfig.from_dict(self.to_dict())
        if seed is not None:
            out.dataset = dataclasses.replace(out.dataset, seed=seed)
            out.training = dataclasses.replace(out.training, seed=seed)
        if mode is not None:
            out.training = dataclasses.replace(out.training, mode=mode)
        return out


def shipped_config(name: str) -> Path:
    return Path(__file__).parent / "configs" / name
