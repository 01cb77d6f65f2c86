"""Run configuration: one TOML document with a flat table per component.

Unknown tables or keys are errors so that a typo can never silently fall back
to a default.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SplitSpec
from .localopt import OptimizerConfig
from .server import Schedule

METHODS = ("pvi", "global_vi", "bcm_same", "bcm_split", "vcl", "streaming_vb")
SOURCES = ("synth_logreg", "synth_linreg", "blobs", "csv", "mnist")


class ConfigError(ValueError):
    def __init__(self, message: str, path=None, key: str | None = None):
        where = f"{path}: " if path else ""
        where += f"[{key}] " if key else ""
        super().__init__(where + message)
        self.message, self.path, self.key = message, path, key


@dataclass
class ModelSection:
    kind: str = "logistic_regression"
    layer_widths: list[int] = field(default_factory=list)
    n_classes: int = 10
    noise_variance: float = 1.0
    bias: bool | None = None
    probit_constant: str = "pi"
    prior_variance: float = 1.0


@dataclass
class DataSection:
    source: str = "synth_logreg"
    d: int = 20
    N: int = 4000
    noise: float = 1.0
    bias: float = 0.0
    weight_seed: int = 0
    weight_scale: float = 1.0
    n_classes: int = 10
    path: str = ""
    target_column: str = "target"
    categorical: list[str] = field(default_factory=list)
    task: str = "classification"
    test_fraction: float = 0.2


@dataclass
class MethodSection:
    name: str = "pvi"
    rounds: int = 1
    order: list[int] | None = None


@dataclass
class EvalSection:
    cadence: str = "commit"
    mc_samples: int = 100
    prune_threshold: float = 0.1
    log_scale: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    split: SplitSpec = field(default_factory=SplitSpec)
    method: MethodSection = field(default_factory=MethodSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: Schedule = field(default_factory=Schedule)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        if self.method.name not in METHODS:
            raise ConfigError(f"unknown method {self.method.name!r}; expected one of {METHODS}", key="method")
        if self.data.source not in SOURCES:
            raise ConfigError(f"unknown data source {self.data.source!r}", key="data")
        if not 0 <= self.data.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)", key="data")
        if self.eval.cadence not in ("commit", "round"):
            raise ConfigError("cadence must be 'commit' or 'round'", key="eval")
        if not self.model.prior_variance > 0:
            raise ConfigError("prior_variance must be positive", key="model")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"model": ModelSection, "data": DataSection, "split": SplitSpec, "method": MethodSection,
             "optimizer": OptimizerConfig, "schedule": Schedule, "eval": EvalSection}


def _build(cls, table: dict, section: str, path):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", path, section)
    values = {k: tuple(v) if isinstance(v, list) and cls is Schedule else v for k, v in table.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path, section) from None


def config_from_dict(doc: dict, path=None) -> RunConfig:
    top = {"seed", "out", *_SECTIONS}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}", path)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        table = doc.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError("expected a table", path, name)
        kwargs[name] = _build(cls, table, name, path)
    cfg = RunConfig(seed=int(doc.get("seed", 0)), out=str(doc.get("out", "")), **kwargs)
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(exc.message, path, exc.key) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file not found", path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", path) from None
    return config_from_dict(doc, path)
