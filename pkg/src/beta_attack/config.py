"""Experiment configuration: nested dataclasses loaded from JSON with strict checking."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class InjectionSection:
    zeta: float = 10.0
    lambda_var: float = 7.0
    rate: float = 0.002
    seed_offset: int = 100


@dataclass(frozen=True)
class DatasetSection:
    source: str = "synthetic"                  # "synthetic" or a CSV path
    n_sensors: int = 12
    n_steps: int = 10_000
    coupling: float = 0.99
    lag_window: int = 50
    scale: float = 4.0
    noise: float = 0.05
    sine_weight: float = 0.99
    ar_coef: float = 0.99
    window: int = 100
    stride: int = 10
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    clip: bool = False
    timestamp_column: str = "timestamp"
    forward_fill: bool = False
    injection: InjectionSection = InjectionSection()


@dataclass(frozen=True)
class ModelSection:
    dim: int = 16
    max_neighbors: int = 5
    head_widths: tuple[int, ...] = (64,)
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    leaky_slope: float = 0.2
    w_init_scale: float = 0.05
    multi_scale: bool = False
    conv_kernels: tuple[int, ...] = (1, 3, 5)
    conv_pool: str = "max"


@dataclass(frozen=True)
class SurrogateSection:
    dim: int = 8
    head_widths: tuple[int, ...] = (32,)
    epochs: int = 100
    seed_offset: int = 1000
    use_victim_graph: bool = True
    holdout: float = 0.5
    query_splits: tuple[str, ...] = ("val", "test")


@dataclass(frozen=True)
class ExplainerSection:
    hidden: int = 32
    generator_hidden: int = 32
    tau_start: float = 0.5
    tau_end: float = 0.1
    sparsity: float = 0.005
    entropy: float = 0.1
    epochs: int = 60
    lr: float = 1e-3
    init_logit: float = 2.0
    max_segments: int = 64
    relative: bool = True


@dataclass(frozen=True)
class AttackSection:
    budget: int = 5
    epsilon: float = 0.1
    alpha: float = 0.01
    iterations: int = 10
    restarts: int = 5
    edges: int | None = None
    measure: str = "eigenvector"
    nettack_edits: int | None = None
    early_stop: bool = False
    strategies: tuple[str, ...] = ("BETA", "PGD+Heuristics", "Nettack+GAF", "Nettack", "Random", "Unbudgeted")
    budgets: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    sweep_strategies: tuple[str, ...] = ("BETA", "Nettack+GAF", "Nettack", "Random")
    measures: tuple[str, ...] = ("eigenvector", "degree", "closeness", "betweenness", "clustering",
                                 "avg_neighbor_degree")
    ablation_budgets: tuple[int, ...] = (3, 4, 5, 6)
    targets: tuple[int, ...] | None = None     # default: every sensor
    eval_stride: int = 10


@dataclass(frozen=True)
class RunSection:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "results"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    surrogate: SurrogateSection = SurrogateSection()
    explainer: ExplainerSection = ExplainerSection()
    attack: AttackSection = AttackSection()
    run: RunSection = RunSection()

    def to_dict(self) -> dict:
        return _to_plain(self)

    def section(self, *names: str) -> dict:
        return {n: _to_plain(getattr(self, n)) for n in names}

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: may not be null")
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError:
                continue
        raise ConfigError(f"{path}: value {value!r} has the wrong type")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{k}]") for k, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries")
        return tuple(_coerce(v, a, f"{path}[{k}]") for k, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig) -> None:
    from .attack import STRATEGIES
    from .graph import MEASURES

    d, m, a = cfg.dataset, cfg.model, cfg.attack
    checks = [
        (d.n_sensors >= 4, "dataset.n_sensors must be at least 4"),
        (d.window >= 1 and d.stride >= 1, "dataset.window and dataset.stride must be positive"),
        (abs(sum(d.split_fractions) - 1.0) < 1e-9 and min(d.split_fractions) > 0,
         "dataset.split_fractions must be positive and sum to 1"),
        (m.dim >= 1 and m.epochs >= 0 and m.lr > 0 and m.batch_size >= 1, "model section has a non-positive value"),
        (1 <= m.max_neighbors < d.n_sensors, "model.max_neighbors must lie in [1, n_sensors - 1]"),
        (m.conv_pool in ("max", "avg"), "model.conv_pool must be 'max' or 'avg'"),
        (0.0 < cfg.surrogate.holdout < 1.0, "surrogate.holdout must lie in (0, 1)"),
        (a.epsilon >= 0 and a.alpha > 0 and a.iterations >= 1 and a.restarts >= 1,
         "attack section has an invalid PGD setting"),
        (a.eval_stride >= 1, "attack.eval_stride must be positive"),
        (a.measure in MEASURES and set(a.measures) <= set(MEASURES), "attack: unknown centrality measure"),
        (set(a.strategies) | set(a.sweep_strategies) <= set(STRATEGIES), "attack: unknown strategy tag"),
        (all(1 <= b < d.n_sensors for b in (a.budget,) + a.budgets + a.ablation_budgets),
         "attack budgets must lie in [1, n_sensors - 1]"),
        (a.targets is None or all(0 <= t < d.n_sensors for t in a.targets), "attack.targets out of range"),
        (len(cfg.run.seeds) >= 1, "run.seeds must not be empty"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        _validate(cfg)
        return cfg
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return from_dict(data)
