"""Run configuration: one JSON document, defaults for everything, strict key checking."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class SuiteConfig:
    train_programs: int = 10
    eval_programs: int = 10


@dataclass(frozen=True)
class EncoderSection:
    dim_sizes: tuple[int, ...] = (32, 8, 8, 8, 8, 8)
    layers: int = 2
    bbe_size: int = 64
    max_len: int = 128
    nip_lookahead: int = 4


@dataclass(frozen=True)
class Stage1Config:
    functions: int = 600
    pretrain_steps: int = 200
    finetune_steps: int = 150
    batch: int = 32
    lr: float = 1e-3
    margin: float = 0.5


@dataclass(frozen=True)
class AggregatorSection:
    width: int = 64
    heads: int = 4
    seeds: int = 1
    cpi_hidden: int = 32
    max_set: int = 4096


@dataclass(frozen=True)
class LossSection:
    w_r: float = 1.0
    w_c: float = 0.5
    huber_delta: float = 1.0
    margin: float = 0.5
    consistency_margin: float | None = None


@dataclass(frozen=True)
class Stage2Config:
    steps: int = 300
    batch: int = 32
    lr: float = 1e-3
    pos_threshold: float = 0.9
    neg_threshold: float = 0.5


@dataclass(frozen=True)
class AdaptConfig:
    programs: int = 2
    fraction: float = 0.2
    steps: int = 100
    batch: int = 32
    lr: float = 1e-3
    cost_model: str = "complex"


@dataclass(frozen=True)
class BcsdConfig:
    pool: int = 100


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    interval_len: int = 4096
    k: int = 8
    cost_model: str = "simple"
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    aggregator: AggregatorSection = field(default_factory=AggregatorSection)
    loss: LossSection = field(default_factory=LossSection)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    bcsd: BcsdConfig = field(default_factory=BcsdConfig)

    def validate(self) -> "RunConfig":
        problems = []
        if self.interval_len < 1:
            problems.append("interval_len must be >= 1")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.cost_model not in ("simple", "complex") or self.adapt.cost_model not in ("simple", "complex"):
            problems.append("cost models are 'simple' or 'complex'")
        if self.suite.train_programs < 1 or self.suite.eval_programs < 1:
            problems.append("suites need at least one program")
        if not 0 < self.adapt.fraction <= 1:
            problems.append("adapt.fraction must lie in (0, 1]")
        if not 1 <= self.adapt.programs <= self.suite.train_programs:
            problems.append("adapt.programs must be between 1 and suite.train_programs")
        if self.bcsd.pool < 2:
            problems.append("bcsd.pool must be >= 2")
        if self.stage1.functions < 2:
            problems.append("stage1.functions must be >= 2")
        if len(self.encoder.dim_sizes) != 6:
            problems.append("encoder.dim_sizes needs six entries")
        if self.aggregator.width % self.aggregator.heads:
            problems.append("aggregator.width must be divisible by aggregator.heads")
        if self.loss.w_r < 0 or self.loss.w_c < 0:
            problems.append("loss weights must be non-negative")
        if problems:
            raise ConfigInvalid("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def stage_seed(self, stage: str) -> int:
        """Independent, reproducible seed per stage derived from the root seed."""
        digest = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "little")


def _plain(x: Any) -> Any:
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigInvalid(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{path}{name}.")
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigInvalid(f"{path}{name} must be a list")
            kwargs[name] = tuple(value)
        else:
            expected = float if isinstance(current, float) else type(current)
            ok = (current is None or value is None or isinstance(value, expected)
                  or (expected is float and isinstance(value, int)))
            if not ok or (isinstance(value, bool) and not isinstance(current, bool)):
                raise ConfigInvalid(f"{path}{name} should be {expected.__name__}, got {value!r}")
            kwargs[name] = float(value) if expected is float and value is not None else value
    return replace(defaults, **kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigInvalid(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config file {path} is not valid JSON: {exc}") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return config_from_dict(data)
