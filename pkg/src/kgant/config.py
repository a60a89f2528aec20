"""Run configuration: YAML file -> validated nested dataclasses.

Every section is optional; missing keys take the defaults below.  Unknown
keys and wrongly typed values are rejected with the offending dotted path.

    seed: 0
    paths: {graph: null, grammar: null, dataset: data, run_dir: runs/default, checkpoint: null}
    data: {n_train: 400, n_test: 100, feature_dim: 64, noise_sigma: 0.5, ...}
    model: {d_model: 32, n_heads: 4, ...}          # ModelConfig fields
    loss: {obs: 1.0, act: 1.0, dur: 10.0}
    train: {steps: 1500, batch_size: 16, lr: 0.002, ...}
    eval: {alphas: [0.05, 0.1], betas: [0.1, 0.2, 0.3, 0.5], beta_model: 0.5}

``null`` graph/grammar paths select the bundled kitchen resources.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import GenConfig, default_resource
from .metrics import DEFAULT_ALPHAS, DEFAULT_BETAS, LossWeights
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    graph: typing.Optional[str] = None
    grammar: typing.Optional[str] = None
    dataset: str = "data"
    run_dir: str = "runs/default"
    checkpoint: typing.Optional[str] = None

    def graph_path(self):
        return Path(self.graph) if self.graph else default_resource("kitchen.graph")

    def grammar_path(self):
        return Path(self.grammar) if self.grammar else default_resource("kitchen_grammar.yaml")


@dataclass
class DataConfig:
    n_train: int = 400
    n_test: int = 100
    feature_dim: int = 64
    noise_sigma: float = 0.5
    distractor_rate: float = 0.1
    clutter_gain: float = 0.0
    glimpse_rate: float = 0.0

    def gen_config(self):
        return GenConfig(self.feature_dim, self.noise_sigma, self.distractor_rate,
                         self.clutter_gain, self.glimpse_rate)


@dataclass
class EvalConfig:
    alphas: tuple = DEFAULT_ALPHAS
    betas: tuple = DEFAULT_BETAS
    beta_model: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["train"].pop("weights", None)  # lives under "loss"
        return _plain(out)

    def train_config(self):
        return dataclasses.replace(self.train, weights=self.loss, seed=self.seed,
                                   beta_model=self.eval.beta_model)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{where}: expected a non-empty list, got {value!r}")
        return tuple(_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value))
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _build(cls, raw, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}")
        else:
            kwargs[key] = _coerce(value, default, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check(cfg):
    if not cfg.train.steps > 0 or not cfg.train.batch_size > 0 or not cfg.train.lr > 0:
        raise ConfigError("train: steps, batch_size and lr must be positive")
    for name in ("alphas", "betas"):
        for v in getattr(cfg.eval, name):
            if not 0 < v < 1:
                raise ConfigError(f"eval.{name}: {v} is not a fraction in (0, 1)")
    for v in cfg.train.train_alphas:
        if not 0 < v < 1:
            raise ConfigError(f"train.train_alphas: {v} is not a fraction in (0, 1)")
    if not 0 < cfg.eval.beta_model < 1:
        raise ConfigError(f"eval.beta_model: {cfg.eval.beta_model} is not a fraction in (0, 1)")
    if cfg.data.n_train < 1 or cfg.data.n_test < 1:
        raise ConfigError("data: n_train and n_test must be >= 1")
    if cfg.model.feature_dim != cfg.data.feature_dim:
        raise ConfigError(f"model.feature_dim {cfg.model.feature_dim} != data.feature_dim {cfg.data.feature_dim}")
    for key in ("graph", "grammar"):
        p = getattr(cfg.paths, f"{key}_path")()
        if not p.is_file():
            raise ConfigError(f"paths.{key}: {p} does not exist")
    return cfg


def from_dict(raw):
    cfg = _build(RunConfig, raw or {}, "config")
    return _check(cfg)


def load(path=None):
    """Read a YAML run config; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML: {exc}") from exc
    return from_dict(raw)


def dump(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)
