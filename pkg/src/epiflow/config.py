"""Run configuration: one YAML file selecting the model, priors, network,
training settings, ablations and data schema."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import DataSchema
from .models import SeirModel, SirModel
from .networks import NetworkConfig
from .priors import ParameterSpace, default_space
from .training import TrainConfig, default_network_config

CONFIG_DIR_ENV = "EPIFLOW_CONFIG_DIR"
ABLATIONS = ("no_filter_net", "no_summary_net", "no_observation_model", "no_intervention_model",
             "no_carrier_compartment")
SEIR_ONLY = ("no_observation_model", "no_intervention_model", "no_carrier_compartment")


@dataclass
class RunConfig:
    model: str = "seir"
    population: float = 83e6
    channels: tuple[str, ...] | None = None
    n_dummies: int = 0
    priors: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    ablations: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.model not in ("sir", "seir"):
            raise ValueError(f"model must be 'sir' or 'seir', got {self.model!r}")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation toggles: {sorted(unknown)}")
        if self.model == "sir":
            on = [k for k in SEIR_ONLY if self.ablations.get(k)]
            if on:
                raise ValueError(f"toggles {on} only apply to the seir model")
        if self.channels is not None:
            self.channels = tuple(self.channels)
        self.population = float(self.population)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["channels"] = list(self.channels) if self.channels else None
        return out

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # ------------------------------------------------------------ builders
    def simulator(self):
        if self.model == "sir":
            kw = {"channels": self.channels} if self.channels else {}
            return SirModel(population=self.population, n_dummies=self.n_dummies, **kw)
        flags = {k: bool(self.ablations.get(k, False)) for k in SEIR_ONLY}
        kw = {"channels": self.channels} if self.channels else {}
        return SeirModel(population=self.population, n_dummies=self.n_dummies, **flags, **kw)

    def space(self) -> ParameterSpace:
        return default_space(self.simulator(), self.priors)

    def network_config(self) -> NetworkConfig:
        sim = self.simulator()
        base = default_network_config(sim, len(sim.param_names), self.seed).to_dict()
        base.update(self.network)
        for k in ("no_filter_net", "no_summary_net"):
            if k in self.ablations:
                base[k] = bool(self.ablations[k])
        return NetworkConfig.from_dict(base)

    def train_config(self, **overrides) -> TrainConfig:
        d = {"n_days": 14 if self.model == "sir" else 82, "seed": self.seed}
        d.update(self.training)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(d)

    def schema(self) -> DataSchema:
        d = {"population": self.population, **self.data}
        return DataSchema.from_dict(d)


def resolve_config_path(name: str | None) -> Path | None:
    """An explicit path, else a file in the configured directory (``.yaml`` optional)."""
    if name is None:
        base = os.environ.get(CONFIG_DIR_ENV)
        candidate = Path(base) / "default.yaml" if base else None
        return candidate if candidate is not None and candidate.is_file() else None
    path = Path(name)
    if path.is_file():
        return path
    base = os.environ.get(CONFIG_DIR_ENV)
    if base:
        for candidate in (Path(base) / name, Path(base) / f"{name}.yaml"):
            if candidate.is_file():
                return candidate
    raise FileNotFoundError(f"config {name!r} not found (also looked in ${CONFIG_DIR_ENV})")


def load_config(name: str | None = None) -> RunConfig:
    path = resolve_config_path(name)
    if path is None:
        return RunConfig()
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw)
