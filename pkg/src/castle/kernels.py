"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: an ``@njit`` version and a pure-numpy version
with identical floating-point operation order per output element. The
active backend is picked at import time from ``CASTLE_BACKEND``
(``numba`` or ``numpy``; default ``numba`` if importable) and can be
switched at runtime with :func:`set_backend`.

The matmul kernels accumulate each output entry as
``((0 + a0*b0) + a1*b1) + ...`` in index order, with no fused
multiply-add. That makes them bit-identical to a scalar triple loop,
which BLAS does not guarantee.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def matmul_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    out = np.zeros((n, b.shape[1]), dtype=np.result_type(a, b))
    for p in range(k):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def sigmoid_numpy(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def masked_sigmoid_numpy(scores: np.ndarray, allow: np.ndarray) -> np.ndarray:
    out = np.zeros_like(scores)
    out[allow] = sigmoid_numpy(scores[allow])
    return out


def row_softmax_numpy(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=1, keepdims=True)


def online_rescale_numpy(block, m_old):
    """One step of the streaming softmax on a score block.

    Returns ``(m_new, p_tilde, alpha)`` with ``p_tilde = exp(block - m_new)``
    and ``alpha = exp(m_old - m_new)``. Rows whose running max is still
    ``-inf`` get ``alpha = 1`` and an all-zero ``p_tilde``.
    """
    m_new = np.maximum(m_old, block.max(axis=1))
    finite = np.isfinite(m_new)
    shift = np.where(finite, m_new, 0.0)
    p_tilde = np.exp(block - shift[:, None])
    alpha = np.where(finite, np.exp(m_old - shift), 1.0)
    return m_new, p_tilde, alpha


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(nogil=True, cache=True)
    def matmul_numba(a, b):
        n, k = a.shape
        m = b.shape[1]
        out = np.zeros((n, m), dtype=a.dtype)
        for i in range(n):
            for p in range(k):
                aip = a[i, p]
                for j in range(m):
                    out[i, j] += aip * b[p, j]
        return out

    @numba.njit(nogil=True, cache=True)
    def _sigmoid_scalar(x):
        if x >= 0:
            return 1.0 / (1.0 + np.exp(-x))
        ex = np.exp(x)
        return ex / (1.0 + ex)

    @numba.njit(nogil=True, cache=True)
    def masked_sigmoid_numba(scores, allow):
        out = np.zeros_like(scores)
        n, m = scores.shape
        for i in range(n):
            for j in range(m):
                if allow[i, j]:
                    out[i, j] = _sigmoid_scalar(scores[i, j])
        return out

    @numba.njit(nogil=True, cache=True)
    def row_softmax_numba(a):
        n, m = a.shape
        out = np.empty_like(a)
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                if a[i, j] > mx:
                    mx = a[i, j]
            s = 0.0
            for j in range(m):
                e = np.exp(a[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(m):
                out[i, j] = out[i, j] / s
        return out

    @numba.njit(nogil=True, cache=True)
    def online_rescale_numba(block, m_old):
        n, m = block.shape
        m_new = np.empty(n, dtype=block.dtype)
        alpha = np.empty(n, dtype=block.dtype)
        p_tilde = np.zeros_like(block)
        for i in range(n):
            mx = m_old[i]
            for j in range(m):
                if block[i, j] > mx:
                    mx = block[i, j]
            m_new[i] = mx
            if mx == -np.inf:
                alpha[i] = 1.0
                continue
            alpha[i] = np.exp(m_old[i] - mx)
            for j in range(m):
                p_tilde[i, j] = np.exp(block[i, j] - mx)
        return m_new, p_tilde, alpha

else:  # pragma: no cover
    matmul_numba = matmul_numpy
    masked_sigmoid_numba = masked_sigmoid_numpy
    row_softmax_numba = row_softmax_numpy
    online_rescale_numba = online_rescale_numpy


_BACKENDS = {
    "numpy": {
        "matmul": matmul_numpy,
        "masked_sigmoid": masked_sigmoid_numpy,
        "row_softmax": row_softmax_numpy,
        "online_rescale": online_rescale_numpy,
    },
    "numba": {
        "matmul": matmul_numba,
        "masked_sigmoid": masked_sigmoid_numba,
        "row_softmax": row_softmax_numba,
        "online_rescale": online_rescale_numba,
    },
}

_active: dict = {}
_active_name = ""


def set_backend(name: str) -> None:
    global _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {sorted(_BACKENDS)}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    _active.clear()
    _active.update(_BACKENDS[name])
    _active_name = name


def get_backend() -> str:
    return _active_name


def kernel(name: str):
    return _active[name]


set_backend(os.environ.get("CASTLE_BACKEND", "numba" if HAVE_NUMBA else "numpy"))
