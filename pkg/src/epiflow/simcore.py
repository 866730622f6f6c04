"""Fixed-step RK4 integration and the random primitives shared by the simulators."""

from __future__ import annotations

from dataclasses import astuple, dataclass
from typing import Callable

import numpy as np

COMPARTMENTS = ("s", "e", "c", "i", "r", "d")

Derivs = Callable[[float, np.ndarray], np.ndarray]


class IntegrationError(FloatingPointError):
    def __init__(self, t: float, state, message: str = "non-finite derivative"):
        super().__init__(f"{message} at t={t}: state={state!r}")
        self.t = t
        self.state = state


@dataclass(frozen=True)
class EpiState:
    """Compartment populations at one instant."""

    s: float
    e: float
    c: float
    i: float
    r: float
    d: float

    @property
    def n(self) -> float:
        return self.s + self.e + self.c + self.i + self.r + self.d

    def to_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "EpiState":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 0.5
    output_stride: int = 2

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.output_stride < 1 or abs(self.output_stride * self.dt - 1.0) > 1e-12:
            raise ValueError("output_stride * dt must equal one day")


def _rk4_raw(y: np.ndarray, derivs: Derivs, t: float, dt: float) -> np.ndarray:
    k1 = derivs(t, y)
    k2 = derivs(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = derivs(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = derivs(t + dt, y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(state, derivs: Derivs, t: float, dt: float, check: bool = True):
    """One classical Runge-Kutta step; negative compartments are clamped to 0.

    ``state`` is an :class:`EpiState` or an array whose last axis holds the
    compartments (leading axes are independent simulations). Returns the new
    state of the same kind and, for arrays, the absolute mass removed by the
    clamp is available through :func:`rk4_step_tracked`.
    """
    if isinstance(state, EpiState):
        y, _ = rk4_step_tracked(state.to_array(), derivs, t, dt, check=check)
        return EpiState.from_array(y)
    y, _ = rk4_step_tracked(np.asarray(state, dtype=np.float64), derivs, t, dt, check=check)
    return y


def rk4_step_tracked(y: np.ndarray, derivs: Derivs, t: float, dt: float,
                     check: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`rk4_step` on arrays, also returning the per-row clamp magnitude."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    y_new = _rk4_raw(y, derivs, t, dt)
    if check and not np.all(np.isfinite(y_new)):
        raise IntegrationError(t, y)
    neg = np.minimum(y_new, 0.0)
    clamp = -neg.sum(axis=-1)
    return y_new - neg, clamp


def integrate(y0: np.ndarray, derivs: Derivs, n_days: int, config: IntegratorConfig = IntegratorConfig(),
              t0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Integrate from ``t0`` and return daily outputs.

    ``y0`` has shape (..., K). Returns ``(traj, clamp)`` with ``traj`` of shape
    (..., n_days + 1, K) holding the state at t0, t0+1, ..., and the total clamp
    magnitude per simulation. Rows that become non-finite are carried as NaN
    rather than raising, so batched callers can flag and resample them.
    """
    y = np.array(y0, dtype=np.float64)
    out = np.empty(y.shape[:-1] + (n_days + 1, y.shape[-1]))
    out[..., 0, :] = y
    clamp_total = np.zeros(y.shape[:-1])
    t = t0
    with np.errstate(over="ignore", invalid="ignore"):
        for day in range(1, n_days + 1):
            for _ in range(config.output_stride):
                y, clamp = rk4_step_tracked(y, derivs, t, config.dt, check=False)
                clamp_total += np.nan_to_num(clamp)
                t += config.dt
            out[..., day, :] = y
    return out, clamp_total


def integrate_rows(y0: np.ndarray, make_derivs: Callable[[np.ndarray], Derivs], n_days: int,
                   config: IntegratorConfig = IntegratorConfig(), clamp_tol: float = 0.0,
                   max_refine: int = 3, factor: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`integrate` with per-row fallback to finer steps.

    ``y0`` has shape (n, K); ``make_derivs(rows)`` returns the derivative
    function for the given row indices. Rows whose clamp magnitude exceeds
    ``clamp_tol`` (the coarse grid overshot below zero, typical of explosive
    outbreaks) or that became non-finite are re-integrated on their own with
    the step divided by ``factor``, up to ``max_refine`` times. Each row's
    result depends only on its own parameters, never on its batch mates.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    rows = np.arange(len(y0))
    traj, clamp = integrate(y0, make_derivs(rows), n_days, config)
    cfg = config
    for _ in range(max_refine):
        bad = rows[(clamp > clamp_tol) | ~np.all(np.isfinite(traj), axis=(1, 2))]
        if bad.size == 0:
            break
        cfg = IntegratorConfig(cfg.dt / factor, cfg.output_stride * factor)
        traj[bad], clamp[bad] = integrate(y0[bad], make_derivs(bad), n_days, cfg)
    return traj, clamp


# ------------------------------------------------------------------ RNG
def make_rng(seed) -> np.random.Generator:
    """A PCG64 generator from an int, SeedSequence or existing generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn(seed_seq: np.random.SeedSequence, n: int) -> list[np.random.Generator]:
    """Independent child generators, e.g. one per parallel simulation task."""
    return [make_rng(s) for s in seed_seq.spawn(n)]


def sample_student_t4(rng: np.random.Generator, size=None):
    """Student-t draws with 4 degrees of freedom, location 0, scale 1."""
    return rng.standard_t(4.0, size=size)


def sample_negbinomial(mean, dispersion, rng: np.random.Generator, size=None):
    """Negative binomial draw with E[X] = mean and Var[X] = mean + mean**2 / dispersion."""
    mean = np.asarray(mean, dtype=np.float64)
    dispersion = np.asarray(dispersion, dtype=np.float64)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(dispersion))):
        raise ValueError("negative binomial parameters must be finite")
    if np.any(mean < 0) or np.any(dispersion <= 0):
        raise ValueError("negative binomial needs mean >= 0 and dispersion > 0")
    p = dispersion / (dispersion + mean)
    draws = rng.negative_binomial(dispersion, p, size=size)
    return draws
