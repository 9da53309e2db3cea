"""JSON run/experiment configuration with field-level diagnostics."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .datagen import SynthConfig
from .hopsampling import DISTRIBUTIONS

MODELS = ("dnn", "gcn", "jk_gcn", "appnp", "gcn_hs", "appnp_hs")
SEED_ENV = "HOPGRAPH_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 1024
    users_per_step: int = 10240
    lr: float = 3e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    negatives: int = 1
    loss: str = "bpr"
    steps_per_day: int = 1
    max_resample: int = 10

    def validate(self):
        for name in ("batch_size", "users_per_step", "negatives", "steps_per_day", "max_resample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be positive")
        if self.epochs < 0:
            raise ConfigError("train.epochs: must be non-negative")
        if not self.lr >= 0:
            raise ConfigError("train.lr: must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1/beta2: must lie in [0, 1)")
        if self.loss not in ("bpr", "sampled_softmax"):
            raise ConfigError("train.loss: must be 'bpr' or 'sampled_softmax'")


@dataclass
class HopSamplingSettings:
    enabled: bool = False
    distribution: str = "uniform_1_to_K"

    def validate(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"hop_sampling.distribution: must be one of {list(DISTRIBUTIONS)}")


@dataclass
class SplitSettings:
    train: int = 14
    valid: int = 3
    test: int = 3
    start: int = 0


@dataclass
class RunConfig:
    dataset: str = "data"
    model: str = "appnp"
    K: int = 4
    alpha: float = 0.3
    dim: int = 128
    encoder_hidden: int = 128
    tower_hidden: int = 128
    window: int = 28
    seed: int = 0
    eval_k: int = 10
    track_test: bool = False
    drop_test_edges: bool = False
    hop_sampling: HopSamplingSettings = field(default_factory=HopSamplingSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSettings = field(default_factory=SplitSettings)

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"model: must be one of {list(MODELS)}, got {self.model!r}")
        if self.model != "dnn" and self.K < 1:
            raise ConfigError("K: graph models need K >= 1")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha: must lie in (0, 1]")
        if self.dim < 1 or self.encoder_hidden < 1 or self.tower_hidden < 1:
            raise ConfigError("dim/encoder_hidden/tower_hidden: must be positive")
        if self.window < 1:
            raise ConfigError("window: must be positive")
        if self.eval_k < 2:
            raise ConfigError("eval_k: must be >= 2 (ILD needs pairs)")
        self.hop_sampling.validate()
        self.train.validate()

    @property
    def backend(self) -> str:
        return self.model.removesuffix("_hs")

    @property
    def hop_sampling_enabled(self) -> bool:
        return self.model.endswith("_hs") or self.hop_sampling.enabled

    @property
    def effective_K(self) -> int:
        return 0 if self.backend == "dnn" else self.K


def benchmark_run() -> RunConfig:
    """Run settings of the bundled desk-scale benchmark.

    ``RunConfig()`` keeps the large-scale defaults (D=128, lr 3e-6, 10240
    users per step); those need far more data and steps than a 2000-user
    synthetic log offers.
    """
    return RunConfig(dim=64, encoder_hidden=64, tower_hidden=64,
                     train=TrainConfig(lr=3e-3, epochs=30, users_per_step=1024, steps_per_day=2))


@dataclass
class ExperimentSpec:
    run: RunConfig = field(default_factory=benchmark_run)
    models: list[str] = field(default_factory=lambda: list(MODELS))
    K_values: list[int] = field(default_factory=lambda: [1, 2, 4, 8, 16])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    attack_models: list[str] = field(default_factory=lambda: ["appnp", "appnp_hs"])
    attack_K: int = 4
    attack_epochs: int = 50
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        self.run.validate()
        if not self.models or not self.K_values or not self.seeds:
            raise ConfigError("models, K_values and seeds must be non-empty")
        for m in self.models + self.attack_models:
            if m not in MODELS:
                raise ConfigError(f"models: unknown model {m!r}")
        if self.attack_K < 1 or self.attack_epochs < 1:
            raise ConfigError("attack_K/attack_epochs: must be >= 1")
        if any(k < 1 for k in self.K_values):
            raise ConfigError("K_values: entries must be >= 1")


def _build(cls, data: Any, path: str):
    if dataclasses.is_dataclass(cls):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or '<root>'}: expected an object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(fields))
        if unknown:
            raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
        kwargs = {}
        hints = _hints(cls)
        for name, value in data.items():
            kwargs[name] = _build(hints[name], value, f"{path}.{name}" if path else name)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path or '<root>'}: {exc}") from exc
    return _coerce(cls, data, path)


def _hints(cls):
    import typing
    return typing.get_type_hints(cls)


def _coerce(tp, value, path):
    origin = getattr(tp, "__origin__", None)
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
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        (inner,) = tp.__args__
        return [_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, list) or len(value) != len(tp.__args__):
            raise ConfigError(f"{path}: expected a list of {len(tp.__args__)} values")
        return tuple(_coerce(t, v, f"{path}[{i}]") for i, (t, v) in enumerate(zip(tp.__args__, value)))
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    return value


def parse_json(text: str, source: str = "<config>") -> dict:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return data


def _merge(base, over):
    if isinstance(base, dict) and isinstance(over, dict):
        return {**base, **{k: _merge(base[k], v) if k in base else v for k, v in over.items()}}
    return over


def from_dict(cls, data: dict, source: str = "<config>"):
    """Build ``cls`` from JSON data layered over ``cls()``'s own defaults.

    Layering matters for nested blocks: a partial ``run`` object in an
    experiment file keeps the experiment's run defaults, not ``RunConfig()``'s.
    """
    try:
        obj = _build(cls, _merge(to_dict(cls()), data), "")
        if hasattr(obj, "validate"):
            obj.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return obj


def load(cls, path, apply_env: bool = True):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    obj = from_dict(cls, parse_json(text, str(path)), str(path))
    if apply_env:
        apply_seed_override(obj)
    return obj


def apply_seed_override(obj) -> None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}") from None
    if isinstance(obj, RunConfig):
        obj.seed = seed
    elif isinstance(obj, ExperimentSpec):
        obj.run.seed = seed
        obj.synth.seed = seed
    elif isinstance(obj, SynthConfig):
        obj.seed = seed


def to_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return json.loads(json.dumps(d))
