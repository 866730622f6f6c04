"""Forward models: the 5-parameter SIR validation model and the 34-parameter
SEIR-carrier model with intervention and observation layers.

Both simulators are vectorized over a batch of parameter vectors; the
single-vector functions :func:`simulate_seir` and :func:`simulate_sir` wrap
the batched code.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .simcore import IntegratorConfig, integrate_rows, make_rng, sample_negbinomial, sample_student_t4

SEIR_PARAM_NAMES = (
    "t1", "t2", "t3", "t4",
    "dt1", "dt2", "dt3", "dt4",
    "lambda0", "lambda1", "lambda2", "lambda3", "lambda4",
    "lag_i", "lag_r", "lag_d",
    "amp_i", "amp_r", "amp_d",
    "phase_i", "phase_r", "phase_d",
    "sigma_i", "sigma_r", "sigma_d",
    "e0", "beta", "gamma", "eta", "mu", "theta_rec", "d_rate", "alpha", "delta",
)
SIR_PARAM_NAMES = ("lambda", "mu", "lag", "psi", "i0")
INTERVENTION_NAMES = SEIR_PARAM_NAMES[:13]
OBSERVATION_NAMES = SEIR_PARAM_NAMES[13:25]
CARRIER_NAMES = ("beta", "eta", "theta_rec", "alpha")
CHANNELS = ("I", "R", "D")
# Largest tolerated clamp mass, relative to the population, before a row is
# re-integrated on a finer grid.
CLAMP_TOL = 1e-9

# Reported posterior medians for Germany, used for the synthetic example data.
REFERENCE_MEDIANS = {
    "t1": 7.23, "t2": 15.01, "t3": 22.10, "t4": 65.55,
    "dt1": 3.02, "dt2": 3.04, "dt3": 3.06, "dt4": 2.95,
    "lambda0": 2.98, "lambda1": 0.32, "lambda2": 0.31, "lambda3": 0.09, "lambda4": 0.13,
    "lag_i": 5.51, "lag_r": 12.88, "lag_d": 11.27,
    "amp_i": 0.55, "amp_r": 0.49, "amp_d": 0.49,
    "phase_i": -0.39, "phase_r": -1.02, "phase_d": -1.33,
    "sigma_i": 7.85, "sigma_r": 10.74, "sigma_d": 2.55,
    "e0": 14.39, "beta": 0.26, "gamma": 0.15, "eta": 0.31, "mu": 0.12,
    "theta_rec": 0.22, "d_rate": 0.15, "alpha": 0.63, "delta": 0.04,
}


# ------------------------------------------------------------------ types
@dataclass(frozen=True)
class InterventionParams:
    onsets: tuple[float, float, float, float]
    durations: tuple[float, float, float, float]
    rates: tuple[float, float, float, float, float]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.onsets, self.onsets[1:])):
            raise ValueError(f"change-point onsets must increase: {self.onsets}")
        if any(d <= 0 for d in self.durations):
            raise ValueError(f"change durations must be positive: {self.durations}")


@dataclass(frozen=True)
class DiseaseParams:
    beta: float
    gamma: float
    eta: float
    mu: float
    theta_rec: float
    d_rate: float
    alpha: float
    delta: float
    e0: float


@dataclass(frozen=True)
class ObservationParams:
    lag_i: float
    lag_r: float
    lag_d: float
    amp_i: float
    amp_r: float
    amp_d: float
    phase_i: float
    phase_r: float
    phase_d: float
    sigma_i: float
    sigma_r: float
    sigma_d: float


@dataclass(frozen=True)
class SirParams:
    lam: float
    mu: float
    lag: float
    psi: float
    i0: float

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"SIR parameter {f.name} must be non-negative")

    def to_vector(self) -> np.ndarray:
        return np.array([self.lam, self.mu, self.lag, self.psi, self.i0])


@dataclass
class SimOutput:
    """Observed daily increments (T x C) and optionally the latent daily states."""

    observed: np.ndarray
    channels: tuple[str, ...]
    latent: np.ndarray | None = None
    ok: bool = True


@dataclass
class SimBatch:
    observed: np.ndarray  # (n, T, C)
    ok: np.ndarray  # (n,) bool; False marks a failed (non-finite) simulation
    latent: np.ndarray | None = None  # (n, burn_in + T, K)
    clamp: np.ndarray | None = None


# ----------------------------------------------------------- intervention
def lambda_schedule(t, onsets: np.ndarray, durations: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Vectorized piecewise-linear transmission rate.

    ``onsets`` and ``durations`` have shape (..., K), ``rates`` (..., K + 1).
    Change point k ramps linearly towards ``rates[k+1]`` over
    ``[onset_k, onset_k + duration_k]``. If the next change point starts while
    a ramp is still running, the new ramp takes over from the value reached at
    its onset, so the rate stays continuous and within the range of ``rates``.
    Without overlap this is the plain ramp from ``rates[k]`` to ``rates[k+1]``.
    """
    n_change = onsets.shape[-1]
    start = rates[..., 0]
    value = np.broadcast_to(start, np.broadcast(start, t).shape).copy()
    for k in range(n_change):
        target = rates[..., k + 1]
        ramp = np.clip((t - onsets[..., k]) / durations[..., k], 0.0, 1.0)
        active = t >= onsets[..., k]
        value = np.where(active, start + (target - start) * ramp, value)
        if k + 1 < n_change:
            at_next = np.clip((onsets[..., k + 1] - onsets[..., k]) / durations[..., k], 0.0, 1.0)
            start = start + (target - start) * at_next
    return value


def lambda_t(iv: InterventionParams, t: float) -> float:
    return float(lambda_schedule(t, np.asarray(iv.onsets), np.asarray(iv.durations), np.asarray(iv.rates)))


def weekly_modulation(amp, phase, t):
    """Fraction of cases missing from reports on day ``t``."""
    return (1.0 - amp) * (1.0 - np.abs(np.sin(np.pi * t / 7.0 - 0.5 * phase)))


def lagged(series: np.ndarray, t: np.ndarray, lag: np.ndarray) -> np.ndarray:
    """Linearly interpolated ``series[..., t - lag]`` with zeros before index 0.

    ``series`` has shape (n, S); ``t`` shape (T,); ``lag`` shape (n,).
    """
    n, s = series.shape
    padded = np.concatenate([np.zeros((n, 1)), series, series[:, -1:]], axis=1)
    pos = t[None, :] - lag[:, None]
    pos = np.clip(pos, -1.0, s - 1)
    lo = np.floor(pos)
    w = pos - lo
    lo_idx = lo.astype(np.intp) + 1
    a = np.take_along_axis(padded, lo_idx, axis=1)
    b = np.take_along_axis(padded, lo_idx + 1, axis=1)
    return (1.0 - w) * a + w * b


def append_dummies(params: np.ndarray, k: int, rng) -> np.ndarray:
    """Append ``k`` Uniform(0, 1) columns that simulators ignore."""
    if k < 0:
        raise ValueError("k must be non-negative")
    params = np.asarray(params, dtype=np.float64)
    if k == 0:
        return params
    rng = make_rng(rng)
    extra = rng.uniform(0.0, 1.0, size=params.shape[:-1] + (k,))
    return np.concatenate([params, extra], axis=-1)


# ----------------------------------------------------------------- models
@dataclass
class SeirModel:
    """SEIR model with an undetected-carrier compartment.

    Latent compartments are (S, E, C, I, R, D). Time 0 of the returned series
    is ``burn_in`` days after the start of integration.
    """

    population: float = 83e6
    channels: tuple[str, ...] = CHANNELS
    burn_in: int = 16
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    no_observation_model: bool = False
    no_intervention_model: bool = False
    no_carrier_compartment: bool = False
    n_dummies: int = 0

    def __post_init__(self):
        self.channels = tuple(self.channels)
        bad = set(self.channels) - set(CHANNELS)
        if bad or not self.channels or "I" not in self.channels:
            raise ValueError(f"channels must include 'I' and be drawn from {CHANNELS}, got {self.channels}")
        if self.population <= 0:
            raise ValueError("population must be positive")

    @property
    def name(self) -> str:
        return "seir"

    @property
    def param_names(self) -> tuple[str, ...]:
        names = list(SEIR_PARAM_NAMES)
        drop = set()
        if self.no_intervention_model:
            drop |= set(INTERVENTION_NAMES) - {"lambda0"}
        if self.no_observation_model:
            drop |= set(OBSERVATION_NAMES)
        if self.no_carrier_compartment:
            drop |= set(CARRIER_NAMES)
        names = [n for n in names if n not in drop]
        return tuple(names) + tuple(f"dummy{j}" for j in range(1, self.n_dummies + 1))

    def config(self) -> dict:
        return {
            "model": "seir",
            "population": self.population,
            "channels": list(self.channels),
            "burn_in": self.burn_in,
            "dt": self.integrator.dt,
            "no_observation_model": self.no_observation_model,
            "no_intervention_model": self.no_intervention_model,
            "no_carrier_compartment": self.no_carrier_compartment,
            "n_dummies": self.n_dummies,
        }

    def _columns(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        names = self.param_names
        if theta.shape[1] != len(names):
            raise ValueError(f"expected {len(names)} parameters, got {theta.shape[1]}")
        return {n: theta[:, j] for j, n in enumerate(names)}

    def derivs(self, p: dict[str, np.ndarray]):
        pop = self.population
        n = len(p["lambda0"])
        if self.no_intervention_model:
            onsets = np.full((n, 1), np.inf)
            durations = np.ones((n, 1))
            rates = np.stack([p["lambda0"], p["lambda0"]], axis=1)
        else:
            onsets = np.stack([p[f"t{k}"] for k in range(1, 5)], axis=1)
            durations = np.stack([p[f"dt{k}"] for k in range(1, 5)], axis=1)
            rates = np.stack([p[f"lambda{k}"] for k in range(5)], axis=1)
        burn_in = self.burn_in
        gamma, mu, d_rate, delta = p["gamma"], p["mu"], p["d_rate"], p["delta"]
        if self.no_carrier_compartment:
            def f(t, y):
                s, e, c, i = y[..., 0], y[..., 1], y[..., 2], y[..., 3]
                lam = lambda_schedule(t - burn_in, onsets, durations, rates)
                force = lam * i / pop * s
                out = np.empty_like(y)
                out[..., 0] = -force
                out[..., 1] = force - gamma * e
                out[..., 2] = 0.0 * c
                out[..., 3] = gamma * e - (1 - delta) * mu * i - delta * d_rate * i
                out[..., 4] = (1 - delta) * mu * i
                out[..., 5] = delta * d_rate * i
                return out
            return f

        beta, eta, theta_rec, alpha = p["beta"], p["eta"], p["theta_rec"], p["alpha"]

        def f(t, y):
            s, e, c, i = y[..., 0], y[..., 1], y[..., 2], y[..., 3]
            lam = lambda_schedule(t - burn_in, onsets, durations, rates)
            force = lam * (c + beta * i) / pop * s
            out = np.empty_like(y)
            out[..., 0] = -force
            out[..., 1] = force - gamma * e
            out[..., 2] = gamma * e - (1 - alpha) * eta * c - alpha * theta_rec * c
            out[..., 3] = (1 - alpha) * eta * c - (1 - delta) * mu * i - delta * d_rate * i
            out[..., 4] = alpha * theta_rec * c + (1 - delta) * mu * i
            out[..., 5] = delta * d_rate * i
            return out

        return f

    def inflows(self, p: dict[str, np.ndarray], latent: np.ndarray) -> dict[str, np.ndarray]:
        """True daily inflow rates into the reported I, R, D compartments."""
        e, c, i = latent[..., 1], latent[..., 2], latent[..., 3]
        if self.no_carrier_compartment:
            into_i = p["gamma"][:, None] * e
        else:
            into_i = ((1 - p["alpha"]) * p["eta"])[:, None] * c
        return {
            "I": into_i,
            "R": ((1 - p["delta"]) * p["mu"])[:, None] * i,
            "D": (p["delta"] * p["d_rate"])[:, None] * i,
        }

    def simulate_batch(self, theta: np.ndarray, n_days: int, rng, return_latent: bool = False) -> SimBatch:
        if n_days < 1:
            raise ValueError("n_days must be >= 1")
        rng = make_rng(rng)
        p = self._columns(theta)
        n = len(p["lambda0"])
        y0 = np.zeros((n, 6))
        y0[:, 1] = p["e0"]
        y0[:, 0] = self.population - p["e0"]
        latent, clamp = integrate_rows(
            y0, lambda rows: self.derivs({k: v[rows] for k, v in p.items()}),
            self.burn_in + n_days - 1, self.integrator, clamp_tol=CLAMP_TOL * self.population)
        flows = self.inflows(p, latent)
        t_data = np.arange(n_days, dtype=np.float64)
        observed = np.empty((n, n_days, len(self.channels)))
        for j, ch in enumerate(self.channels):
            key = ch.lower()
            if self.no_observation_model:
                observed[:, :, j] = np.maximum(flows[ch][:, self.burn_in:], 0.0)
                continue
            true = lagged(flows[ch], t_data + self.burn_in, p[f"lag_{key}"])
            f_c = weekly_modulation(p[f"amp_{key}"][:, None], p[f"phase_{key}"][:, None], t_data[None, :])
            expected = (1.0 - f_c) * true
            noise = sample_student_t4(rng, size=(n, n_days))
            sigma = p[f"sigma_{key}"]
            cum = np.zeros(n)
            with np.errstate(invalid="ignore"):
                for t in range(n_days):
                    inc = expected[:, t] + np.sqrt(cum) * sigma * noise[:, t]
                    inc = np.maximum(inc, 0.0)
                    observed[:, t, j] = inc
                    cum = cum + inc
        ok = np.all(np.isfinite(latent), axis=(1, 2)) & np.all(np.isfinite(observed), axis=(1, 2))
        return SimBatch(observed, ok, latent if return_latent else None, clamp)

    def simulate(self, theta: np.ndarray, n_days: int, rng) -> tuple[np.ndarray, np.ndarray]:
        batch = self.simulate_batch(theta, n_days, rng)
        return batch.observed, batch.ok


@dataclass
class SirModel:
    """SIR model with negative-binomial reporting of lagged new infections."""

    population: float = 83e6
    burn_in: int = 16
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    n_dummies: int = 0
    channels: tuple[str, ...] = ("I",)

    @property
    def name(self) -> str:
        return "sir"

    @property
    def param_names(self) -> tuple[str, ...]:
        return SIR_PARAM_NAMES + tuple(f"dummy{j}" for j in range(1, self.n_dummies + 1))

    def config(self) -> dict:
        return {
            "model": "sir",
            "population": self.population,
            "channels": list(self.channels),
            "burn_in": self.burn_in,
            "dt": self.integrator.dt,
            "n_dummies": self.n_dummies,
        }

    def latent(self, theta: np.ndarray, n_days: int) -> tuple[np.ndarray, np.ndarray]:
        """Daily (S, I, R) states from integration start, plus clamp magnitudes."""
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        lam, mu, i0 = theta[:, 0], theta[:, 1], theta[:, 4]
        pop = self.population

        def make(rows):
            lam_r, mu_r = lam[rows], mu[rows]

            def f(t, y):
                s, i = y[..., 0], y[..., 1]
                new = lam_r * s * i / pop
                return np.stack([-new, new - mu_r * i, mu_r * i], axis=-1)

            return f

        y0 = np.stack([pop - i0, i0, np.zeros_like(i0)], axis=1)
        return integrate_rows(y0, make, n_days, self.integrator, clamp_tol=CLAMP_TOL * pop)

    def simulate_batch(self, theta: np.ndarray, n_days: int, rng, return_latent: bool = False) -> SimBatch:
        if n_days < 1:
            raise ValueError("n_days must be >= 1")
        rng = make_rng(rng)
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if theta.shape[1] != len(self.param_names):
            raise ValueError(f"expected {len(self.param_names)} parameters, got {theta.shape[1]}")
        lam, lag, psi = theta[:, 0], theta[:, 2], theta[:, 3]
        latent, clamp = self.latent(theta, self.burn_in + n_days - 1)
        new_inf = lam[:, None] * latent[..., 0] * latent[..., 1] / self.population
        ok = np.all(np.isfinite(latent), axis=(1, 2))
        t_data = np.arange(n_days, dtype=np.float64) + self.burn_in
        mean = lagged(np.where(ok[:, None], new_inf, 0.0), t_data, lag)
        mean = np.maximum(mean, 0.0)
        counts = sample_negbinomial(mean, np.broadcast_to(psi[:, None], mean.shape), rng)
        observed = counts.astype(np.float64)[:, :, None]
        observed[~ok] = np.nan
        return SimBatch(observed, ok, latent if return_latent else None, clamp)

    def simulate(self, theta: np.ndarray, n_days: int, rng) -> tuple[np.ndarray, np.ndarray]:
        batch = self.simulate_batch(theta, n_days, rng)
        return batch.observed, batch.ok


def simulate_seir(params: Sequence[float], pop: float, t_days: int, rng, **model_kwargs) -> SimOutput:
    """Simulate one SEIR parameter vector; see :class:`SeirModel`."""
    model = SeirModel(population=pop, **model_kwargs)
    batch = model.simulate_batch(np.asarray(params)[None, :], t_days, rng, return_latent=True)
    return SimOutput(batch.observed[0], model.channels, batch.latent[0], bool(batch.ok[0]))


def simulate_sir(params, pop: float, t_days: int, rng, **model_kwargs) -> SimOutput:
    """Simulate one SIR parameter vector (trailing dummy entries are ignored)."""
    vec = params.to_vector() if isinstance(params, SirParams) else np.asarray(params, dtype=np.float64)
    model = SirModel(population=pop, n_dummies=len(vec) - len(SIR_PARAM_NAMES), **model_kwargs)
    batch = model.simulate_batch(vec[None, :], t_days, rng, return_latent=True)
    return SimOutput(batch.observed[0], model.channels, batch.latent[0], bool(batch.ok[0]))


def reference_vector(names: Sequence[str] = SEIR_PARAM_NAMES) -> np.ndarray:
    return np.array([REFERENCE_MEDIANS[n] for n in names])


def build_model(config: dict):
    """Rebuild a simulator from the dictionary produced by its ``config()``."""
    cfg = dict(config)
    kind = cfg.pop("model")
    if kind == "toy":
        from .toy import GaussianToy

        return GaussianToy(**cfg)
    dt = cfg.pop("dt", 0.5)
    integrator = IntegratorConfig(dt, round(1.0 / dt))
    cfg["channels"] = tuple(cfg.get("channels", CHANNELS if kind == "seir" else ("I",)))
    if kind == "seir":
        return SeirModel(integrator=integrator, **cfg)
    if kind == "sir":
        return SirModel(integrator=integrator, **cfg)
    raise ValueError(f"unknown model {kind!r}")
