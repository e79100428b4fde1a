"""Run configuration: one JSON document covering data generation, training and evaluation.

Every section rejects keys it does not know. Defaults are filled in on load, so
``RunConfig.to_dict()`` is always the fully materialised configuration.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, InvalidArgumentError
from .synth import SynthConfig
from .train import TrainConfig

SCHEMA_VERSION = 1
SEED_ENV = "SYMBOX_SEED"


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    sample_pct: float = 100.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be positive")
        if not 0 < self.sample_pct <= 100:
            raise ConfigError(f"sample_pct must be in (0, 100], got {self.sample_pct}")
        if not 0 <= self.noise_sigma < 1:
            raise ConfigError(f"noise_sigma must be in [0, 1), got {self.noise_sigma}")


@dataclass(frozen=True)
class EvalConfig:
    score_threshold: float = 0.3
    nms_iou: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "synth": _synth_to_dict(self.synth),
            "data": asdict(self.data),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        _reject_unknown("run config", d, {f.name for f in fields(cls)})
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version} is not supported (expected {SCHEMA_VERSION})")
        try:
            return cls(
                seed=d.get("seed"),
                synth=_synth_from_dict(d.get("synth", {})),
                data=_simple(DataConfig, "data", d.get("data", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                eval=_simple(EvalConfig, "eval", d.get("eval", {})),
            )
        except ConfigError:
            raise
        except (InvalidArgumentError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def resolved_seed(self) -> int:
        """Config seed, else ``$SYMBOX_SEED``, else 0."""
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get(SEED_ENV)
        if env is None or env == "":
            return 0
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


def _reject_unknown(section: str, d: dict, known: set):
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def _simple(cls, section: str, d: dict):
    _reject_unknown(section, d, {f.name for f in fields(cls)})
    return cls(**d)


def _synth_to_dict(c: SynthConfig) -> dict:
    d = asdict(c)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def _synth_from_dict(d: dict) -> SynthConfig:
    _reject_unknown("synth", d, {f.name for f in fields(SynthConfig)})
    d = dict(d)
    for k in ("long_side", "aspect", "intensity"):
        if k in d:
            d[k] = tuple(d[k])
    return SynthConfig(**d)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


def save_config(path, config: RunConfig):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
