"""Flat ``section.key = value`` run configuration.

The document is TOML restricted to dotted keys with scalar values, e.g.::

    run.seed = 3
    synthetic.num_nodes = 500
    train.epochs = 20
    flow.method = "forward-euler"

Every key belongs to a known section; unknown keys are rejected and each
command names the keys it requires.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dynamics import FlowConfig
from .nnet import ModelConfig, TrainConfig
from .synthetic import SyntheticConfig

__all__ = ["ConfigError", "PartitionSettings", "DDSettings", "RunConfig", "SCHEMA", "REQUIRED", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionSettings:
    k: int = 3
    m: int = 0  # 0 means k - 1
    penalty_scale: float = 1.0
    overlap_hops: int = 0
    sigma_x: float = 0.0  # 0 means median heuristic
    sigma_f: float = 0.0
    sigma_y: float = 0.0
    local_scaling: bool = True


@dataclass(frozen=True)
class DDSettings:
    workers: int = 1
    validate_every: int = 1
    weighting: str = "uniform"


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    split: str = "test"


_SECTIONS = {
    "run": RunSettings,
    "synthetic": SyntheticConfig,
    "flow": FlowConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "partition": PartitionSettings,
    "dd": DDSettings,
}
# seeds come from run.seed only
_SKIP = {("synthetic", "seed"), ("train", "seed")}


def _schema():
    out = {}
    for sec, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (sec, f.name) in _SKIP:
                continue
            default = f.default
            kind = type(default) if default is not None else int
            out[f"{sec}.{f.name}"] = (kind, default)
    return out


SCHEMA = _schema()

REQUIRED = {
    "gen-data": ("synthetic.num_nodes", "synthetic.num_realizations", "synthetic.num_snapshots"),
    "partition": (),
    "train": ("train.epochs",),
    "predict": (),
    "evaluate": (),
}


def _flatten(doc, prefix=""):
    flat = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _check_type(key, value):
    kind, _ = SCHEMA[key]
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__} {value!r}")
    return value


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source_text: str | None = None

    def get(self, key):
        if key in self.values:
            return self.values[key]
        return SCHEMA[key][1]

    def section(self, name) -> dict:
        return {k.split(".", 1)[1]: self.get(k) for k in SCHEMA if k.startswith(name + ".")}

    @property
    def seed(self) -> int:
        return self.get("run.seed")

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(seed=self.seed, **self.section("synthetic"))

    def flow(self) -> FlowConfig:
        return FlowConfig(**self.section("flow"))

    def model(self) -> ModelConfig:
        return ModelConfig(**self.section("model"))

    def train(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.section("train"))

    def partition(self) -> PartitionSettings:
        return PartitionSettings(**self.section("partition"))

    def dd(self) -> DDSettings:
        return DDSettings(**self.section("dd"))

    def validate(self, command=None):
        for key in REQUIRED.get(command, ()):
            if key not in self.values:
                raise ConfigError(f"missing required key {key!r}")
        try:
            self.synthetic(), self.flow(), self.model(), self.train()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.dd().weighting not in ("uniform", "boundary-distance"):
            raise ConfigError(f"dd.weighting must be 'uniform' or 'boundary-distance', got {self.dd().weighting!r}")
        if self.get("run.split") not in ("train", "validation", "test"):
            raise ConfigError(f"run.split must be train, validation or test, got {self.get('run.split')!r}")
        return self

    def resolved_text(self) -> str:
        """Every key with its effective value, one per line, loadable again."""
        lines = []
        for key in SCHEMA:
            v = self.get(key)
            if v is None:
                continue
            lines.append(f"{key} = {json.dumps(v) if not isinstance(v, float) else repr(v)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    flat = _flatten(doc)
    unknown = sorted(set(flat) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    values = {k: _check_type(k, v) for k, v in flat.items()}
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _check_type(k, v)
    return RunConfig(values, text)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    text = "" if path is None else Path(path).read_text()
    return parse_config(text, overrides)
