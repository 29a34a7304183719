"""Run configuration: JSON file with every field defaulted; CLI flags override."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .data import SynthConfig
from .evaluation import PipelineConfig
from .nn import TrainConfig


@dataclass
class DataConfig:
    cycles_csv: str | None = None
    capacity_csv: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    synth_seed: int = 0


@dataclass
class KnotConfig:
    mode: str = "uniform"
    k: int = 3
    eol: float = 80.0
    top: float = 98.0
    budget: int = 60
    window: int = 5


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    knots: KnotConfig = field(default_factory=KnotConfig)
    input_cycles: int = 1
    n_points: int = 128
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    folds: int = 5
    mc_samples: int = 100
    anchor_mode: str = "measured"
    sigmas: list = field(default_factory=lambda: [0.001, 0.003, 0.01])
    n_draws: int = 100
    cycle_counts: list = field(default_factory=lambda: [1, 3, 10, 50])
    out: str = "out"

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            k=self.knots.k,
            knot_mode=self.knots.mode,
            eol=self.knots.eol,
            top=self.knots.top,
            input_cycles=self.input_cycles,
            n_points=self.n_points,
            n_folds=self.folds,
            seed=self.seed,
            mc_samples=self.mc_samples,
            bo_budget=self.knots.budget,
            window=self.knots.window,
            anchor_mode=self.anchor_mode,
            train=self.train,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, values: dict):
    if not isinstance(values, dict):
        raise ValueError(f"expected an object for {cls.__name__}, got {values!r}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in values.items():
        current = getattr(defaults, name)
        kwargs[name] = _build(type(current), value) if is_dataclass(current) else value
    return cls(**kwargs)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as f:
        return _build(RunConfig, json.load(f))


def from_dict(values: dict) -> RunConfig:
    return _build(RunConfig, values)
