"""Adaptive-moment optimizer with cosine learning-rate decay and norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class TrainingAborted(RuntimeError):
    pass


@dataclass
class CosineDecay:
    initial: float = 5e-4
    final: float = 1e-5
    decay_steps: int = 0  # 0 disables the decay

    def __call__(self, step: int) -> float:
        if self.decay_steps <= 0:
            return self.initial
        frac = min(step, self.decay_steps) / self.decay_steps
        return self.final + 0.5 * (self.initial - self.final) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    skipped: int = 0
    consecutive_skips: int = 0
    schedule: CosineDecay = field(default_factory=CosineDecay)


class Adam:
    """Adam with bias correction.

    Steps with any non-finite gradient are skipped (weights and moments are
    left untouched); more than ``max_consecutive_skips`` in a row aborts.
    """

    def __init__(self, params: list[Tensor], lr: float | CosineDecay = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7, clip_norm: float | None = 5.0,
                 max_consecutive_skips: int = 100):
        self.params = list(params)
        schedule = lr if isinstance(lr, CosineDecay) else CosineDecay(initial=lr, final=lr)
        self.state = OptimizerState(
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
            schedule=schedule,
        )
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.max_consecutive_skips = max_consecutive_skips

    @property
    def lr(self) -> float:
        return self.state.schedule(self.state.step)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def skip(self) -> bool:
        """Record a skipped step without touching weights or moments."""
        st = self.state
        st.skipped += 1
        st.consecutive_skips += 1
        if st.consecutive_skips > self.max_consecutive_skips:
            raise TrainingAborted(f"{st.consecutive_skips} consecutive non-finite steps")
        return False

    def step(self, grads: list[np.ndarray | None] | None = None) -> bool:
        """Apply one update. Returns False if the step was skipped."""
        if grads is None:
            grads = [p.grad for p in self.params]
        grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(self.params, grads)]
        st = self.state
        if not all(np.all(np.isfinite(g)) for g in grads):
            return self.skip()
        st.consecutive_skips = 0
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = [g * scale for g in grads]
        lr = st.schedule(st.step)
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** st.step
        corr2 = 1.0 - b2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
        return True
