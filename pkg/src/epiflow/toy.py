"""Linear-Gaussian toy problem with a closed-form posterior.

theta ~ N(0, I_2) and each of the T observations is x_t = theta + eps_t with
eps_t ~ N(0, noise_cov). Used to validate flows, training and calibration
against exact answers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import SimBatch
from .priors import ParameterSpace, ParamSpec, Prior
from .simcore import make_rng


@dataclass
class GaussianToy:
    noise_cov: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.5], [0.5, 1.0]]))
    n_dummies: int = 0

    def __post_init__(self):
        self.noise_cov = np.asarray(self.noise_cov, dtype=np.float64)
        self._chol = np.linalg.cholesky(self.noise_cov)

    @property
    def name(self) -> str:
        return "toy"

    @property
    def param_names(self) -> tuple[str, ...]:
        return ("theta1", "theta2") + tuple(f"dummy{j}" for j in range(1, self.n_dummies + 1))

    @property
    def channels(self) -> tuple[str, ...]:
        return ("x1", "x2")

    def config(self) -> dict:
        return {"model": "toy", "noise_cov": self.noise_cov.tolist(), "n_dummies": self.n_dummies}

    def simulate_batch(self, theta, n_days: int, rng, return_latent: bool = False) -> SimBatch:
        rng = make_rng(rng)
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))[:, :2]
        eps = rng.standard_normal((len(theta), n_days, 2)) @ self._chol.T
        x = theta[:, None, :] + eps
        return SimBatch(x, np.ones(len(theta), dtype=bool))

    def simulate(self, theta, n_days: int, rng):
        batch = self.simulate_batch(theta, n_days, rng)
        return batch.observed, batch.ok

    def posterior(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Exact posterior mean and covariance of theta given x of shape (T, 2)."""
        x = np.asarray(x, dtype=np.float64)
        prec_noise = np.linalg.inv(self.noise_cov)
        cov = np.linalg.inv(np.eye(2) + len(x) * prec_noise)
        mean = cov @ (prec_noise @ x.sum(axis=0))
        return mean, cov

    def exact_sampler(self, space: ParameterSpace):
        """Posterior sampler with the ``(x, m, rng) -> natural draws`` signature."""

        def sample(x, m, rng):
            gen = make_rng(rng)
            mean, cov = self.posterior(x)
            draws = gen.multivariate_normal(mean, cov, size=m)
            if self.n_dummies:
                draws = np.hstack([draws, space.subset(space.names[2:]).sample(gen, m)])
            return draws

        return sample


def toy_space(n_dummies: int = 0) -> ParameterSpace:
    specs = tuple(ParamSpec(n, "unbounded", Prior("normal", 0.0, 1.0)) for n in ("theta1", "theta2"))
    space = ParameterSpace(specs)
    return space.with_dummies(n_dummies) if n_dummies else space
