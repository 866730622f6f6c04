"""Naive reference implementations used as test oracles."""

import numpy as np


def conv1d_oracle(x, kernels):
    t_len, c_in = x.shape
    k, _, n_f = kernels.shape
    pad = k // 2
    out = np.zeros((t_len, n_f))
    for t in range(t_len):
        for j in range(k):
            src = t + j - pad
            if 0 <= src < t_len:
                for c in range(c_in):
                    for f in range(n_f):
                        out[t, f] += x[src, c] * kernels[j, c, f]
    return out


def lstm_step_oracle(x, h, c, w_x, w_h, b):
    """Textbook LSTM step, gates [input, forget, candidate, output], plain numpy."""
    hid = h.shape[-1]
    z = x @ w_x + h @ w_h + b
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    i, f, g, o = sig(z[..., :hid]), sig(z[..., hid:2 * hid]), np.tanh(z[..., 2 * hid:3 * hid]), sig(z[..., 3 * hid:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new
