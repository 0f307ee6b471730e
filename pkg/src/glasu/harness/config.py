"""Experiment configuration: JSON file plus command-line overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..errors import ConfigError
from ..federation import AggKind, ModelConfig, RoundConfig, make_agg
from ..model import Gcn, Gcnii, LayerKind
from ..sampling import LabelMode, LayerPlan, SamplerConfig
from ..theory import SmoothnessConstants

PRESETS = ("glasu", "centralized", "standalone", "simcentralized")


@dataclass
class ExperimentConfig:
    dataset_path: str = ""
    M: int = 2
    edge_keep_prob: float = 0.8
    layers: int = 2
    agg_layers: Optional[list] = None  # None: uniform placement of ``K`` layers
    K: Optional[int] = None
    backbone: str = "gcn"
    hidden_dim: int = 16
    agg_kind: str = "average"
    batch_size: int = 16
    fanout: int = 3
    T: int = 100
    Q: int = 1
    eta: float = 0.1
    label_mode: str = "all"
    seed: Optional[int] = None
    # harness extras
    preset: str = "glasu"
    transport: str = "inproc"
    port: int = 0
    eval_every: int = 0
    gcnii_alpha: float = 0.1
    gcnii_lambda: float = 0.5
    constants: Optional[dict] = None  # G_ell, L_ell, G_f, L_f for the step-size check

    def validate(self) -> "ExperimentConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.M < 1 or self.layers < 1:
            raise ConfigError("M and layers must be positive")
        if self.backbone not in ("gcn", "gcnii"):
            raise ConfigError(f"unknown backbone {self.backbone!r} (expected 'gcn' or 'gcnii')")
        if self.label_mode not in ("all", "single"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r} (expected 'all' or 'single')")
        if self.agg_layers is not None and self.K is not None and len(self.agg_layers) != self.K:
            raise ConfigError(f"K={self.K} disagrees with agg_layers={self.agg_layers}")
        self.plan()
        self.round_config()
        self.sampler()
        self.model()
        make_agg(self.agg_kind, self.M, self.hidden_dim)
        if self.constants is not None:
            self.smoothness()
        return self

    def plan(self) -> LayerPlan:
        if self.agg_layers is not None:
            return LayerPlan(self.layers, tuple(self.agg_layers))
        return LayerPlan.uniform(self.layers, self.K if self.K is not None else self.layers)

    def round_config(self) -> RoundConfig:
        return RoundConfig(self.T, self.Q, self.eta, LabelMode(self.label_mode))

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.batch_size, self.fanout)

    def kind(self) -> LayerKind:
        return Gcnii(self.gcnii_alpha, self.gcnii_lambda) if self.backbone == "gcnii" else Gcn()

    def model(self) -> ModelConfig:
        return ModelConfig(self.kind(), self.hidden_dim)

    def agg(self) -> AggKind:
        return make_agg(self.agg_kind, self.M, self.hidden_dim)

    def smoothness(self) -> SmoothnessConstants:
        try:
            return SmoothnessConstants(**self.constants)
        except TypeError as exc:
            raise ConfigError(f"bad smoothness constants: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def from_dict(data: dict) -> ExperimentConfig:
    unknown = sorted(set(data) - set(FIELDS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data)


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
