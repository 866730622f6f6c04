"""Amortized posterior sampling and the diagnostics built on it."""

from __future__ import annotations

import datetime as _dt
import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .priors import ParameterSpace
from .simcore import make_rng
from .training import NetworkCheckpoint, simulate_pairs

QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_WARN = 0.2

Sampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


class MisspecificationWarning(UserWarning):
    """Too many posterior re-simulations diverged."""


def data_hash(x) -> str:
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:16]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Estimator:
    """A loaded checkpoint: network, parameter space and simulator, ready for inference."""

    def __init__(self, ckpt: NetworkCheckpoint):
        self.ckpt = ckpt
        self.net = ckpt.amortizer()
        self.space = ckpt.parameter_space()
        self.simulator = ckpt.simulator()
        self.id = ckpt.id

    @classmethod
    def of(cls, obj) -> "Estimator":
        return obj if isinstance(obj, Estimator) else cls(obj)

    @property
    def names(self) -> tuple[str, ...]:
        return self.space.names

    def sample(self, x, m: int, rng) -> np.ndarray:
        """Natural-space draws (m, P) for one series."""
        return self.space.to_natural(self.net.sample(x, m, rng))

    def sample_many(self, xs, m: int, rng, chunk: int = 64) -> np.ndarray:
        """Natural-space draws (B, m, P) for a stack of equal-length series."""
        rng = make_rng(rng)
        xs = np.asarray(xs)
        out = []
        for lo in range(0, len(xs), chunk):
            u = self.net.sample_batch(xs[lo:lo + chunk], m, rng)
            out.append(self.space.to_natural(u.reshape(-1, u.shape[-1])).reshape(u.shape))
        return np.concatenate(out)

    def as_sampler(self) -> Sampler:
        return lambda x, m, rng: self.sample(x, m, rng)


# ---------------------------------------------------------------- posterior
@dataclass
class PosteriorDraws:
    samples: np.ndarray
    names: tuple[str, ...]
    checkpoint_id: str
    data_hash: str
    created: str = field(default_factory=_now)
    seed: int | None = None

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.names.index(name)]


def sample_posterior(ckpt, x_obs, m: int, rng=None) -> PosteriorDraws:
    """Draw ``m`` parameter vectors given one observed series (T, C)."""
    est = Estimator.of(ckpt)
    seed = rng if isinstance(rng, (int, np.integer)) else None
    samples = est.sample(x_obs, m, make_rng(rng))
    return PosteriorDraws(samples, est.names, est.id, data_hash(x_obs), seed=seed)


@dataclass
class ParamSummary:
    name: str
    median: float
    mean: float
    map: float
    ci_low: float
    ci_high: float
    q25: float
    q75: float

    def row(self) -> list:
        return [self.name, self.median, self.mean, self.map, self.ci_low, self.ci_high, self.q25, self.q75]


SUMMARY_COLUMNS = ("parameter", "median", "mean", "map", "ci_2.5", "ci_97.5", "q25", "q75")


def kde_mode(x: np.ndarray, grid_size: int = 512) -> float:
    """Mode of a Gaussian KDE (Silverman bandwidth) on a grid over the sample range."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        return float(np.median(x))
    grid = np.linspace(lo, hi, grid_size)
    density = stats.gaussian_kde(x, bw_method="silverman")(grid)
    return float(grid[np.argmax(density)])


def summarize_posterior(draws, names: Sequence[str] | None = None) -> list[ParamSummary]:
    samples = draws.samples if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=np.float64)
    names = draws.names if isinstance(draws, PosteriorDraws) else names
    if samples.ndim == 1:
        samples = samples[:, None]
    if len(samples) < 100:
        raise ValueError(f"need at least 100 posterior draws, got {len(samples)}")
    names = names or [f"p{j}" for j in range(samples.shape[1])]
    out = []
    for j, name in enumerate(names):
        col = samples[:, j]
        q = np.quantile(col, [0.025, 0.25, 0.5, 0.75, 0.975])
        out.append(ParamSummary(name, float(q[2]), float(col.mean()), kde_mode(col), float(q[0]), float(q[4]),
                                float(q[1]), float(q[3])))
    return out


# ---------------------------------------------------------------------- SBC
@dataclass
class RankStatistics:
    ranks: np.ndarray  # (n_sims, P), each in [0, m_sbc]
    m_sbc: int
    names: tuple[str, ...]
    chi2: np.ndarray
    threshold: float
    sim_failures: int = 0
    n_bins: int = 10

    @property
    def uniform(self) -> np.ndarray:
        return self.chi2 < self.threshold

    def report(self) -> list[dict]:
        return [{"parameter": n, "chi2": float(c), "threshold": self.threshold, "uniform": bool(u)}
                for n, c, u in zip(self.names, self.chi2, self.uniform)]


def rank_chi2(ranks: np.ndarray, m_sbc: int, n_bins: int = 10) -> np.ndarray:
    """Chi-square statistic of integer ranks in [0, m_sbc] over equal-width bins.

    Expected counts account for bins holding different numbers of rank values.
    """
    ranks = np.asarray(ranks)
    if ranks.ndim == 1:
        ranks = ranks[:, None]
    bins = (ranks * n_bins) // (m_sbc + 1)
    values_per_bin = np.bincount((np.arange(m_sbc + 1) * n_bins) // (m_sbc + 1), minlength=n_bins)
    expected = len(ranks) * values_per_bin / (m_sbc + 1)
    out = []
    for j in range(ranks.shape[1]):
        observed = np.bincount(bins[:, j], minlength=n_bins)
        out.append(np.sum((observed - expected) ** 2 / expected))
    return np.array(out)


def sbc_threshold(n_bins: int = 10, level: float = 0.99) -> float:
    return float(stats.chi2.ppf(level, n_bins - 1))


def run_sbc(ckpt, space: ParameterSpace | None = None, simulator=None, n_sims: int = 1000, m_sbc: int = 100,
            rng=None, n_days: int | None = None, sampler: Sampler | None = None,
            n_bins: int = 10) -> RankStatistics:
    """Simulation-based calibration: rank of each prior draw among its own posterior draws.

    ``sampler(x, m, rng)`` replaces the network when given (used to check the
    procedure against an exact posterior).
    """
    if n_sims < 100:
        raise ValueError("run_sbc needs n_sims >= 100")
    if m_sbc < 50:
        raise ValueError("run_sbc needs m_sbc >= 50")
    est = Estimator.of(ckpt) if ckpt is not None else None
    space = space or est.space
    simulator = simulator or est.simulator
    if n_days is None:
        n_days = est.ckpt.train["n_days"]
    rng = make_rng(rng)
    theta, x, failures = simulate_pairs(space, simulator, n_sims, n_days, rng, max_failures=10 * n_sims)
    if sampler is None:
        draws = est.sample_many(x, m_sbc, rng)
    else:
        draws = np.stack([sampler(xi, m_sbc, rng) for xi in x])
    ranks = np.sum(draws < theta[:, None, :], axis=1)
    return RankStatistics(ranks, m_sbc, tuple(space.names), rank_chi2(ranks, m_sbc, n_bins),
                          sbc_threshold(n_bins), failures, n_bins)


# --------------------------------------------------------- predictive
@dataclass
class ForecastEnvelope:
    quantiles: tuple[float, ...]
    values: np.ndarray  # (len(quantiles), n_train + horizon, C)
    channels: tuple[str, ...]
    n_train: int
    horizon: int
    ensemble: np.ndarray  # (M_kept, n_train + horizon, C)
    n_divergent: int = 0

    @property
    def divergent_fraction(self) -> float:
        total = len(self.ensemble) + self.n_divergent
        return self.n_divergent / total if total else 0.0

    def band(self, low: float = 0.025, high: float = 0.975) -> tuple[np.ndarray, np.ndarray]:
        return self.values[self.quantiles.index(low)], self.values[self.quantiles.index(high)]

    def coverage(self, observed, start: int = 0, low: float = 0.025, high: float = 0.975) -> float:
        """Fraction of observed points (days ``start`` onward) inside the band."""
        obs = np.asarray(observed, dtype=np.float64)
        lo, hi = self.band(low, high)
        lo, hi = lo[start:start + len(obs)], hi[start:start + len(obs)]
        return float(np.mean((obs >= lo) & (obs <= hi)))

    def width(self, low: float = 0.025, high: float = 0.975) -> np.ndarray:
        lo, hi = self.band(low, high)
        return hi - lo

    def cumulative(self, anchor) -> np.ndarray:
        """Quantiles of cumulative counts; day 0 equals ``anchor``, the first observed
        cumulative value per channel, and later days add the predicted increments."""
        inc = self.ensemble.copy()
        inc[:, 0] = 0.0
        cum = np.asarray(anchor, dtype=np.float64) + np.cumsum(inc, axis=1)
        return np.quantile(cum, self.quantiles, axis=0)


def posterior_predictive(ckpt, draws, simulator=None, horizon: int = 0, rng=None, n_train: int | None = None,
                         quantiles: Sequence[float] = QUANTILES) -> ForecastEnvelope:
    """Re-simulate the training window plus ``horizon`` days for every posterior draw."""
    samples = draws.samples if isinstance(draws, PosteriorDraws) else np.atleast_2d(np.asarray(draws))
    if len(samples) == 0:
        raise ValueError("no posterior draws")
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    est = Estimator.of(ckpt) if ckpt is not None else None
    simulator = simulator or est.simulator
    if n_train is None:
        n_train = est.ckpt.train["n_days"]
    batch = simulator.simulate_batch(samples, n_train + horizon, make_rng(rng))
    obs = batch.observed
    with np.errstate(invalid="ignore"):
        bad = ~batch.ok | ~np.all(np.isfinite(obs), axis=(1, 2))
        pop = getattr(simulator, "population", None)
        if pop is not None:
            bad |= np.any(obs > DIVERGENCE_FACTOR * pop, axis=(1, 2))
    n_bad = int(bad.sum())
    if n_bad / len(samples) > DIVERGENCE_WARN:
        warnings.warn(f"{n_bad} of {len(samples)} posterior re-simulations diverged; "
                      "the model may be misspecified for these data", MisspecificationWarning, stacklevel=2)
    kept = obs[~bad]
    if len(kept) == 0:
        raise FloatingPointError("every posterior re-simulation diverged")
    values = np.quantile(kept, quantiles, axis=0)
    return ForecastEnvelope(tuple(quantiles), values, tuple(simulator.channels), n_train, horizon, kept, n_bad)


# ------------------------------------------------------------------ dummies
@dataclass
class DummyReport:
    names: tuple[str, ...]
    ks: np.ndarray  # (n_test, k)
    medians: np.ndarray  # (n_test, P) natural-space posterior medians
    theta: np.ndarray
    x: np.ndarray

    @property
    def mean_ks(self) -> np.ndarray:
        return self.ks.mean(axis=0)


def dummy_posterior_check(ckpt, n_test: int = 50, rng=None, m: int = 2000, n_days: int | None = None) -> DummyReport:
    """Kolmogorov-Smirnov distance of each dummy's posterior to its prior, averaged over test sets."""
    est = Estimator.of(ckpt)
    idx = [j for j, n in enumerate(est.names) if n.startswith("dummy")]
    if not idx:
        raise ValueError("checkpoint has no dummy dimensions")
    if n_days is None:
        n_days = est.ckpt.train["n_days"]
    rng = make_rng(rng)
    theta, x, _ = simulate_pairs(est.space, est.simulator, n_test, n_days, rng, max_failures=10 * n_test)
    draws = est.sample_many(x, m, rng)
    ks = np.empty((n_test, len(idx)))
    for k, j in enumerate(idx):
        prior = est.space.specs[j].prior
        cdf = stats.uniform(loc=prior.a, scale=prior.b - prior.a).cdf
        for i in range(n_test):
            ks[i, k] = stats.kstest(draws[i, :, j], cdf).statistic
    return DummyReport(tuple(est.names[j] for j in idx), ks, np.median(draws, axis=1), theta, x)


def median_agreement(with_dummies, without, x, rng=None, m: int = 2000) -> float:
    """Correlation of real-parameter posterior medians from two checkpoints on the same series.

    Medians are compared in the standardized unconstrained space of the
    dummy-free checkpoint, pooled over series and parameters.
    """
    a, b = Estimator.of(with_dummies), Estimator.of(without)
    names = b.names
    cols = [a.names.index(n) for n in names]
    rng = make_rng(rng)
    med_a = np.median(a.sample_many(x, m, rng)[:, :, cols], axis=1)
    med_b = np.median(b.sample_many(x, m, rng), axis=1)
    ua, ub = b.space.to_unconstrained(med_a), b.space.to_unconstrained(med_b)
    return float(np.corrcoef(ua.ravel(), ub.ravel())[0, 1])


# ------------------------------------------------------------------ writers
def write_delimited(path, columns: Sequence[str], rows, meta: dict | None = None, sep: str = ",") -> None:
    """Header row plus data rows, preceded by ``# key: value`` metadata lines."""
    with open(path, "w") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        fh.write(sep.join(columns) + "\n")
        for row in rows:
            fh.write(sep.join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_draws(path, draws: PosteriorDraws, meta: dict | None = None) -> None:
    # the creation time goes to the run manifest so that data files stay byte-reproducible
    info = {"checkpoint": draws.checkpoint_id, "data_hash": draws.data_hash, "seed": draws.seed, **(meta or {})}
    write_delimited(path, draws.names, draws.samples, info)


def write_summary(path, summary: list[ParamSummary], meta: dict | None = None) -> None:
    write_delimited(path, SUMMARY_COLUMNS, [s.row() for s in summary], meta)


def write_ranks(path, ranks: RankStatistics, meta: dict | None = None) -> None:
    info = {"m_sbc": ranks.m_sbc, "chi2_threshold": ranks.threshold,
            "chi2": " ".join(f"{n}={c:.3f}" for n, c in zip(ranks.names, ranks.chi2)), **(meta or {})}
    write_delimited(path, ranks.names, ranks.ranks, info)


def write_forecast(path, env: ForecastEnvelope, dates: Sequence[str] | None = None, meta: dict | None = None,
                   horizon_only: bool = False) -> None:
    days = range(env.n_train if horizon_only else 0, env.n_train + env.horizon)
    cols = ["day", "date", "channel", "in_training"] + [f"q{100 * q:g}" for q in env.quantiles]
    rows = []
    for t in days:
        for c, ch in enumerate(env.channels):
            date = dates[t] if dates is not None and t < len(dates) else ""
            rows.append([t, date, ch, int(t < env.n_train)] + [env.values[k, t, c] for k in range(len(env.quantiles))])
    info = {"n_train": env.n_train, "horizon": env.horizon, "divergent": env.n_divergent, **(meta or {})}
    write_delimited(path, cols, rows, info)
