"""Differentiable building blocks: 1-D convolution, LSTM cell, dense layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, _wrap, add, concat, default_dtype, matmul, sigmoid, tanh


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding.

    ``x`` has shape (T, C) or (B, T, C), ``kernels`` shape (k, C, F) with odd k.
    Output has shape (T, F) or (B, T, F).
    """
    if kernels.ndim != 3:
        raise ValueError(f"kernels must be (k, C, F), got {kernels.shape}")
    k, c_in, n_filters = kernels.shape
    if k % 2 != 1:
        raise ValueError(f"kernel width must be odd for same padding, got {k}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or xd.shape[-1] != c_in:
        raise ValueError(f"conv1d shape mismatch: input {x.shape}, kernels {kernels.shape}")
    b, t, _ = xd.shape
    pad = k // 2
    xp = np.zeros((b, t + 2 * pad, c_in), dtype=xd.dtype)
    xp[:, pad : pad + t] = xd
    cols = np.concatenate([xp[:, j : j + t] for j in range(k)], axis=-1)
    w2 = kernels.data.reshape(k * c_in, n_filters)
    out = cols @ w2
    if unbatched:
        out = out[0]

    def backward(g):
        g3 = g[None] if unbatched else g
        if kernels.requires_grad:
            gw = cols.reshape(-1, k * c_in).T @ g3.reshape(-1, n_filters)
            kernels._accum(gw.reshape(kernels.shape))
        if x.requires_grad:
            gcols = g3 @ w2.T
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + t] += gcols[..., j * c_in : (j + 1) * c_in]
            gx = gxp[:, pad : pad + t]
            x._accum(gx[0] if unbatched else gx)

    out_t = _wrap(out, (x, kernels), backward)
    if bias is not None:
        out_t = add(out_t, bias)
    return out_t


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor,
              b: Tensor, x_proj: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate layout [input, forget, candidate, output].

    ``x_proj`` may carry a precomputed ``x_t @ w_x + b`` so that sequence
    runners can project all time steps with a single matmul.
    """
    hidden = h_prev.shape[-1]
    if x_proj is None:
        x_proj = add(matmul(x_t, w_x), b)
    z = add(x_proj, matmul(h_prev, w_h))
    i = sigmoid(z[..., :hidden])
    f = sigmoid(z[..., hidden : 2 * hidden])
    g = tanh(z[..., 2 * hidden : 3 * hidden])
    o = sigmoid(z[..., 3 * hidden :])
    c_t = f * c_prev + i * g
    h_t = o * tanh(c_t)
    return h_t, c_t


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype or default_dtype())


def parameter(values: np.ndarray, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=dtype)


class Module:
    """Container whose tracked tensors and sub-modules are discovered by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, activation=None,
                 zero_init: bool = False, dtype=None):
        w = np.zeros((n_in, n_out)) if zero_init else glorot(rng, n_in, n_out)
        self.w = parameter(w, dtype)
        self.b = parameter(np.zeros(n_out), dtype)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        out = add(matmul(x, self.w), self.b)
        return self.activation(out) if self.activation is not None else out


class Conv1D(Module):
    def __init__(self, width: int, n_in: int, n_filters: int, rng: np.random.Generator, dtype=None):
        self.kernels = parameter(glorot(rng, width * n_in, n_filters, shape=(width, n_in, n_filters)), dtype)
        self.bias = parameter(np.zeros(n_filters), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.kernels, self.bias)


class LSTM(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, dtype=None):
        self.hidden = hidden
        self.w_x = parameter(glorot(rng, n_in, 4 * hidden), dtype)
        # orthogonal-ish recurrent init keeps long sequences from exploding
        q, _ = np.linalg.qr(rng.standard_normal((4 * hidden, hidden)))
        self.w_h = parameter(q.T, dtype)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        self.b = parameter(bias, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        """Run over (B, T, C) and return the final hidden state (B, H)."""
        batch, steps = x.shape[0], x.shape[1]
        dtype = self.w_x.dtype
        h = Tensor(np.zeros((batch, self.hidden)), dtype=dtype)
        c = Tensor(np.zeros((batch, self.hidden)), dtype=dtype)
        proj = add(matmul(x, self.w_x), self.b)
        for t in range(steps):
            h, c = lstm_cell(None, h, c, self.w_x, self.w_h, self.b, x_proj=proj[:, t])
        return h

