"""Hot numeric kernels.

Each kernel has a numba ``@njit`` body and a pure-numpy twin.  Which one is
bound to the public name is decided once at import time: numba is used when
it imports cleanly and ``FWDGUIDE_NUMBA`` is not set to ``0``.  Both variants
stay importable (``*_numba`` / ``*_numpy``) so tests and the benchmark can
compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

NUMBA_OPTS = {"cache": True, "fastmath": False}

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and os.environ.get("FWDGUIDE_NUMBA", "1") != "0"


def njit(func):
    if numba is None:
        return func
    return numba.njit(**NUMBA_OPTS)(func)


# --------------------------------------------------------------------------
# pairwise mean Euclidean distance (energy distance terms)
# --------------------------------------------------------------------------


def _pair_dist_sum_py(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        row = 0.0
        for j in range(b.shape[0]):
            acc = 0.0
            for k in range(a.shape[1]):
                d = a[i, k] - b[j, k]
                acc += d * d
            row += np.sqrt(acc)
        total += row
    return total


pair_dist_sum_numba = njit(_pair_dist_sum_py)


def pair_dist_sum_numpy(a, b, chunk=1024):
    """Sum of ||a_i - b_j|| over all pairs, blocked to bound temporaries."""
    total = 0.0
    for start in range(0, a.shape[0], chunk):
        block = a[start:start + chunk]
        diff = block[:, None, :] - b[None, :, :]
        total += float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).sum())
    return total


def pair_dist_mean(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if USE_NUMBA:
        s = pair_dist_sum_numba(a, b)
    else:
        s = pair_dist_sum_numpy(a, b)
    return float(s) / (a.shape[0] * b.shape[0])


# --------------------------------------------------------------------------
# Adam update, in place on flat float64 buffers
# --------------------------------------------------------------------------


def _adam_update_py(param, grad, m, v, lr, beta1, beta2, eps, step):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i in range(param.shape[0]):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        mhat = m[i] / c1
        vhat = v[i] / c2
        param[i] -= lr * mhat / (np.sqrt(vhat) + eps)


adam_update_numba = njit(_adam_update_py)


def adam_update_numpy(param, grad, m, v, lr, beta1, beta2, eps, step):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step) -> None:
    """One Adam step; ``param``, ``m`` and ``v`` are 1-D and mutated in place."""
    if USE_NUMBA:
        adam_update_numba(param, grad, m, v, lr, beta1, beta2, eps, step)
    else:
        adam_update_numpy(param, grad, m, v, lr, beta1, beta2, eps, step)


# --------------------------------------------------------------------------
# relu with tangent / cotangent masking fused into a single pass
# --------------------------------------------------------------------------


def _relu_mask_py(x, g):
    out = np.empty_like(g)
    for i in range(x.shape[0]):
        out[i] = g[i] if x[i] > 0.0 else 0.0
    return out


relu_mask_numba = njit(_relu_mask_py)


def relu_mask_numpy(x, g):
    return np.where(x > 0.0, g, 0.0)


def relu_mask(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``g`` where ``x > 0`` else 0; used by both AD engines for relu."""
    if USE_NUMBA and x.size >= 4096:
        return relu_mask_numba(x.ravel(), np.ascontiguousarray(g).ravel()).reshape(x.shape)
    return relu_mask_numpy(x, g)
