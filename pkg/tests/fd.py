"""Central finite-difference oracle, independent of the autodiff engine."""

import numpy as np


def numerical_grad(fn, arrays, h=1e-4):
    """Gradient of scalar ``fn()`` w.r.t. each array in ``arrays`` (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = float(fn())
            arr[idx] = orig - h
            fm = float(fn())
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
