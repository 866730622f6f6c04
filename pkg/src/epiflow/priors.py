"""Parameter priors and bijections between natural and unconstrained space.

The estimator networks only ever see *standardized unconstrained* parameters:
each natural value is mapped to the real line by its transform (log, logit,
scaled logit, identity, or log of the gap to a preceding parameter for
ordered change points), then shifted and scaled by Monte-Carlo estimates of
the transformed prior's mean and standard deviation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy import special

from .simcore import make_rng

SUPPORTS = ("positive", "unit-interval", "bounded", "unbounded", "ordered")
TRANSFORMS = {
    "positive": "log",
    "unit-interval": "logit",
    "bounded": "scaled-logit",
    "unbounded": "identity",
    "ordered": "log-gap",
}


class SupportError(ValueError):
    """A natural-space value lies outside its parameter's support."""


@dataclass(frozen=True)
class Prior:
    family: str
    a: float
    b: float

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "normal":
            return rng.normal(self.a, self.b, size=n)
        if self.family == "lognormal":
            return self.a * np.exp(self.b * rng.standard_normal(n))
        if self.family == "uniform":
            u = rng.uniform(self.a, self.b, size=n)
            # open interval so logit transforms stay finite
            return np.where(u <= self.a, np.nextafter(self.a, self.b), u)
        if self.family == "logitnormal":
            return special.expit(special.logit(self.a) + self.b * rng.standard_normal(n))
        raise ValueError(f"unknown prior family {self.family!r}")

    def to_dict(self) -> dict:
        keys = {
            "normal": ("mean", "sd"),
            "lognormal": ("median", "log_sd"),
            "uniform": ("low", "high"),
            "logitnormal": ("median", "logit_sd"),
        }[self.family]
        return {"prior": self.family, keys[0]: self.a, keys[1]: self.b}


@dataclass(frozen=True)
class ParamSpec:
    name: str
    support: str
    prior: Prior
    bounds: tuple[float, float] | None = None
    after: str | None = None

    def __post_init__(self):
        if self.support not in SUPPORTS:
            raise ValueError(f"{self.name}: unknown support {self.support!r}")
        fam = self.prior.family
        if self.support == "bounded":
            if self.bounds is None or not self.bounds[0] < self.bounds[1]:
                raise ValueError(f"{self.name}: bounded support needs lo < hi, got {self.bounds}")
        if self.support == "ordered" and not self.after:
            raise ValueError(f"{self.name}: ordered support needs a predecessor")
        allowed = {
            "positive": {"lognormal"},
            "ordered": {"lognormal"},
            "unbounded": {"normal"},
            "unit-interval": {"uniform", "logitnormal"},
            "bounded": {"uniform"},
        }[self.support]
        if fam not in allowed:
            raise ValueError(f"{self.name}: prior {fam!r} not compatible with support {self.support!r}")
        if fam in ("normal", "lognormal", "logitnormal") and not self.prior.b > 0:
            raise ValueError(f"{self.name}: prior scale must be positive")
        if fam == "lognormal" and not self.prior.a > 0:
            raise ValueError(f"{self.name}: log-normal median must be positive")
        if fam == "logitnormal" and not 0 < self.prior.a < 1:
            raise ValueError(f"{self.name}: logit-normal median must lie in (0, 1)")
        if fam == "uniform":
            lo, hi = self.prior.a, self.prior.b
            if not lo < hi:
                raise ValueError(f"{self.name}: uniform prior needs low < high")
            box = (0.0, 1.0) if self.support == "unit-interval" else self.bounds
            if lo < box[0] or hi > box[1]:
                raise ValueError(f"{self.name}: uniform prior [{lo}, {hi}] exceeds support {box}")

    @property
    def transform(self) -> str:
        return TRANSFORMS[self.support]

    @classmethod
    def from_dict(cls, name: str, entry: Mapping) -> "ParamSpec":
        fam = entry["prior"]
        if fam == "normal":
            prior, support = Prior(fam, float(entry["mean"]), float(entry["sd"])), "unbounded"
        elif fam == "lognormal":
            prior = Prior(fam, float(entry["median"]), float(entry["log_sd"]))
            support = "ordered" if entry.get("after") else "positive"
        elif fam == "logitnormal":
            prior, support = Prior(fam, float(entry["median"]), float(entry["logit_sd"])), "unit-interval"
        elif fam == "uniform":
            lo, hi = float(entry["low"]), float(entry["high"])
            prior = Prior(fam, lo, hi)
            support = "unit-interval" if (lo, hi) == (0.0, 1.0) else "bounded"
        else:
            raise ValueError(f"{name}: unknown prior family {fam!r}")
        support = entry.get("support", support)
        bounds = entry.get("bounds")
        if bounds is None and support == "bounded":
            bounds = (prior.a, prior.b)
        return cls(name, support, prior, tuple(bounds) if bounds else None, entry.get("after"))

    def to_dict(self) -> dict:
        out = self.prior.to_dict()
        out["support"] = self.support
        if self.bounds is not None:
            out["bounds"] = list(self.bounds)
        if self.after:
            out["after"] = self.after
        return out


@dataclass(frozen=True)
class ParameterSpace:
    specs: tuple[ParamSpec, ...]
    mean: np.ndarray | None = field(default=None, compare=False)
    std: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names: {names}")
        for j, s in enumerate(self.specs):
            if s.after is not None and s.after not in names[:j]:
                raise ValueError(f"{s.name}: predecessor {s.after!r} must come earlier")
        if self.std is not None and not np.all(np.asarray(self.std) > 0):
            raise ValueError("standardization stds must be positive")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.specs)

    @property
    def dim(self) -> int:
        return len(self.specs)

    @property
    def standardized(self) -> bool:
        return self.mean is not None

    def index(self, name: str) -> int:
        return self.names.index(name)

    def _pred(self, spec: ParamSpec) -> int:
        return self.index(spec.after)

    # ------------------------------------------------------------ sampling
    def sample(self, rng, n: int | None = None) -> np.ndarray:
        rng = make_rng(rng)
        m = 1 if n is None else n
        out = np.empty((m, self.dim))
        for j, s in enumerate(self.specs):
            draw = s.prior.sample(rng, m)
            out[:, j] = out[:, self._pred(s)] + draw if s.support == "ordered" else draw
        return out[0] if n is None else out

    # ---------------------------------------------------------- transforms
    def to_unconstrained(self, v, standardize: bool = True) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        flat = np.atleast_2d(v)
        if flat.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} parameters, got {flat.shape[-1]}")
        u = np.empty_like(flat)
        for j, s in enumerate(self.specs):
            x = flat[:, j]
            if s.support == "ordered":
                x = x - flat[:, self._pred(s)]
            self._check_support(s, x)
            u[:, j] = _forward(s, x)
        if standardize:
            u = self._standardize(u)
        return u.reshape(v.shape)

    def to_natural(self, u, standardized: bool = True) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        flat = np.atleast_2d(u)
        if flat.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} parameters, got {flat.shape[-1]}")
        if not np.all(np.isfinite(flat)):
            raise ValueError("unconstrained values must be finite")
        if standardized:
            flat = self._require_stats()[0] + flat * self._require_stats()[1]
        v = np.empty_like(flat)
        for j, s in enumerate(self.specs):
            x = _inverse(s, flat[:, j])
            v[:, j] = v[:, self._pred(s)] + x if s.support == "ordered" else x
        return v.reshape(u.shape)

    def log_abs_jacobian(self, v) -> np.ndarray:
        """Per-dimension log |d u_j / d x_j| of the (unstandardized) elementwise transforms."""
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        out = np.empty_like(v)
        for j, s in enumerate(self.specs):
            x = v[:, j] - v[:, self._pred(s)] if s.support == "ordered" else v[:, j]
            out[:, j] = _log_abs_dforward(s, x)
        return out

    def _check_support(self, s: ParamSpec, x: np.ndarray) -> None:
        if s.support in ("positive", "ordered"):
            bad = ~(x > 0)
        elif s.support == "unit-interval":
            bad = ~((x > 0) & (x < 1))
        elif s.support == "bounded":
            bad = ~((x > s.bounds[0]) & (x < s.bounds[1]))
        else:
            bad = ~np.isfinite(x)
        if np.any(bad):
            what = "gap to " + s.after if s.support == "ordered" else "value"
            raise SupportError(f"parameter {s.name!r}: {what} {x[bad][0]!r} outside {s.support} support")

    def _require_stats(self):
        if self.mean is None:
            raise RuntimeError("parameter space has no standardization; call fit_standardization first")
        return self.mean, self.std

    def _standardize(self, u: np.ndarray) -> np.ndarray:
        mean, std = self._require_stats()
        return (u - mean) / std

    # -------------------------------------------------------- construction
    def fit_standardization(self, n_draws: int = 100_000, rng=0) -> "ParameterSpace":
        if n_draws < 1000:
            raise ValueError("fit_standardization needs at least 1000 draws")
        u = self.to_unconstrained(self.sample(rng, n_draws), standardize=False)
        return replace(self, mean=u.mean(axis=0), std=u.std(axis=0, ddof=1))

    def with_dummies(self, k: int) -> "ParameterSpace":
        dummy = ParamSpec.from_dict("dummy", load_default_priors()["dummy"])
        start = sum(n.startswith("dummy") for n in self.names)
        extra = tuple(replace(dummy, name=f"dummy{j}") for j in range(start + 1, start + k + 1))
        return ParameterSpace(self.specs + extra)

    def subset(self, names: Sequence[str]) -> "ParameterSpace":
        lookup = {s.name: s for s in self.specs}
        return ParameterSpace(tuple(lookup[n] for n in names))

    def to_dict(self) -> dict:
        # a list, not a mapping: parameter order defines the network's output layout
        out = {"params": [{"name": s.name, **s.to_dict()} for s in self.specs]}
        if self.mean is not None:
            out["mean"] = [float(x) for x in self.mean]
            out["std"] = [float(x) for x in self.std]
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ParameterSpace":
        specs = tuple(ParamSpec.from_dict(e["name"], e) for e in d["params"])
        mean = np.array(d["mean"]) if "mean" in d else None
        std = np.array(d["std"]) if "std" in d else None
        return cls(specs, mean, std)

    def config_hash(self) -> str:
        """Hash of the prior definition (standardization excluded)."""
        text = json.dumps({"params": self.to_dict()["params"]}, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# ------------------------------------------------------------ transforms
def _forward(s: ParamSpec, x: np.ndarray) -> np.ndarray:
    if s.transform in ("log", "log-gap"):
        return np.log(x)
    if s.transform == "logit":
        return special.logit(x)
    if s.transform == "scaled-logit":
        lo, hi = s.bounds
        return special.logit((x - lo) / (hi - lo))
    return x.copy()


def _inverse(s: ParamSpec, u: np.ndarray) -> np.ndarray:
    if s.transform in ("log", "log-gap"):
        return np.exp(u)
    if s.transform == "logit":
        return special.expit(u)
    if s.transform == "scaled-logit":
        lo, hi = s.bounds
        return lo + (hi - lo) * special.expit(u)
    return u.copy()


def _log_abs_dforward(s: ParamSpec, x: np.ndarray) -> np.ndarray:
    if s.transform in ("log", "log-gap"):
        return -np.log(x)
    if s.transform == "logit":
        return -np.log(x) - np.log1p(-x)
    if s.transform == "scaled-logit":
        lo, hi = s.bounds
        z = (x - lo) / (hi - lo)
        return -np.log(z) - np.log1p(-z) - np.log(hi - lo)
    return np.zeros_like(x)


# ---------------------------------------------------------------- defaults
def load_default_priors() -> dict:
    text = resources.files("epiflow").joinpath("default_priors.yaml").read_text()
    return yaml.safe_load(text)


def build_space(names: Iterable[str], table: Mapping[str, Mapping],
                overrides: Mapping[str, Mapping] | None = None) -> ParameterSpace:
    """Assemble a space for ``names`` from a prior table plus per-name overrides.

    Names of the form ``dummy<k>`` fall back to the table's ``dummy`` entry.
    """
    overrides = overrides or {}
    specs = []
    names = list(names)
    for name in names:
        entry = overrides.get(name) or table.get(name)
        if entry is None and name.startswith("dummy"):
            entry = table.get("dummy") or load_default_priors()["dummy"]
        if entry is None:
            raise KeyError(f"no prior defined for parameter {name!r}")
        entry = dict(entry)
        if entry.get("after") and entry["after"] not in names:
            # predecessor removed (e.g. ablation): fall back to an unordered positive prior
            entry.pop("after")
        specs.append(ParamSpec.from_dict(name, entry))
    return ParameterSpace(tuple(specs))


def default_space(model, overrides: Mapping[str, Mapping] | None = None) -> ParameterSpace:
    """Default prior space for a simulator exposing ``name`` and ``param_names``."""
    table = load_default_priors()
    return build_space(model.param_names, {**table[model.name], "dummy": table["dummy"]}, overrides)


# --------------------------------------------------------- function API
def sample_prior(space: ParameterSpace, rng, n: int | None = None) -> np.ndarray:
    return space.sample(rng, n)


def to_unconstrained(space: ParameterSpace, v, standardize: bool = True) -> np.ndarray:
    return space.to_unconstrained(v, standardize)


def to_natural(space: ParameterSpace, u, standardized: bool = True) -> np.ndarray:
    return space.to_natural(u, standardized)


def fit_standardization(space: ParameterSpace, n_draws: int = 100_000, rng=0) -> ParameterSpace:
    return space.fit_standardization(n_draws, rng)
