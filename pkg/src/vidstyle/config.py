"""Run configuration: one JSON document, every default spelled out.

Precedence is command-line flag > config file > built-in default.
"""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .datagen import DEFAULT_THRESHOLDS
from .metrics import METRIC_SEED
from .net import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class Geometry:
    frames: int = 8
    height: int = 16
    width: int = 16


@dataclass
class FlowSection:
    steps: int = 16


@dataclass
class DatagenSection:
    ct_samples: int = 2048
    sft_samples: int = 256
    test_samples: int = 32
    max_retries: int = 20
    thresholds: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_THRESHOLDS)))


@dataclass
class StageSection:
    iterations: int = 2000
    lr: float = 1e-3


@dataclass
class TrainerSection:
    base: StageSection = field(default_factory=lambda: StageSection(1500, 2e-3))
    ct: StageSection = field(default_factory=lambda: StageSection(2000, 2e-3))
    sft: StageSection = field(default_factory=lambda: StageSection(500, 1e-3))
    batch: int = 4
    accum: int = 2
    ratios: list = field(default_factory=lambda: [1.0, 2.0, 1.0])
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 0.01
    val_count: int = 32
    val_every: int = 250
    checkpoint_every: int = 500


@dataclass
class MetricsSection:
    feature_seed: int = METRIC_SEED
    centroid_videos: int = 16


@dataclass
class Paths:
    data: str = "data"
    runs: str = "runs"


@dataclass
class Seeds:
    data: int = 0
    init: int = 0
    train: int = 0
    sample: int = 0
    eval: int = 0


@dataclass
class RunConfig:
    geometry: Geometry = field(default_factory=Geometry)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowSection = field(default_factory=FlowSection)
    datagen: DatagenSection = field(default_factory=DatagenSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    paths: Paths = field(default_factory=Paths)
    seeds: Seeds = field(default_factory=Seeds)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        return cls.from_dict(d)

    def override(self, dotted: dict) -> "RunConfig":
        """New config with ``{"trainer.ct.lr": 1e-3, ...}`` applied on top."""
        d = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)

    def validate(self):
        g = self.geometry
        s, p = 2, self.model.patch
        if g.frames < 1 or g.height % (s * p) or g.width % (s * p):
            raise ConfigError(f"geometry {g} must have frames >= 1 and sides divisible by {s * p}")
        if self.model.latent_channels != 3 * s * s:
            raise ConfigError(f"model.latent_channels must be {3 * s * s} for the stride-{s} codec")
        if self.metrics.feature_seed != METRIC_SEED:
            raise ConfigError(f"metrics.feature_seed is fixed at {METRIC_SEED}")
        for tier in ("CT", "SFT"):
            th = self.datagen.thresholds.get(tier)
            if not isinstance(th, dict) or set(th) != {"tau_style", "tau_struct"}:
                raise ConfigError(f"datagen.thresholds.{tier} needs exactly tau_style and tau_struct")
        if set(self.datagen.thresholds) != {"CT", "SFT"}:
            raise ConfigError("datagen.thresholds must have exactly the CT and SFT profiles")
        if len(self.trainer.ratios) != 3 or min(self.trainer.ratios) <= 0:
            raise ConfigError("trainer.ratios must be three positive numbers")
        if self.flow.steps < 1:
            raise ConfigError("flow.steps must be at least 1")
        try:
            self.model.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where or '<root>'} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    extra = set(d) - set(known)
    if extra:
        raise ConfigError(f"unknown keys in {where or '<root>'}: {sorted(extra)}")
    kwargs = {}
    for name, value in d.items():
        tp = hints[name]
        path = f"{where}.{name}" if where else name
        if is_dataclass(tp):
            kwargs[name] = _build(tp, value, path)
        else:
            kwargs[name] = _coerce(tp, value, path)
    return cls(**kwargs)


def _coerce(tp, value, path):
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp in (str, list, dict) and isinstance(value, tp):
        return value
    if tp in (int, float, str, list, dict):
        raise ConfigError(f"{path}: expected {tp.__name__}, got {value!r}")
    return value
