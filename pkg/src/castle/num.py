"""Dense numerics shared by every attention engine.

Matrices are plain 2-D ``numpy`` arrays (float64 unless a benchmark asks
for float32). Additive masks may hold ``-inf``; everything else must be
finite.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import threading
from collections import defaultdict

import numpy as np

from castle import kernels

Mat = np.ndarray

DEFAULT_DTYPE = np.float64


class ContractError(ValueError):
    """Raised when an operation's shape or state precondition is violated."""


# --------------------------------------------------------------------------
# FLOP counting
# --------------------------------------------------------------------------

_active_counters: list["FlopCounter"] = []
_counters_lock = threading.Lock()
_region: contextvars.ContextVar[str] = contextvars.ContextVar("flop_region", default="untagged")


class FlopCounter:
    """Counts multiply-adds issued through :func:`matmul`.

    Use as a context manager; nested counters all receive the same counts.
    Per-region totals are kept in ``by_region`` (see :func:`flop_region`).
    """

    def __init__(self) -> None:
        self.multiply_adds = 0
        self.by_region: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def add(self, n: int, region: str = "untagged") -> None:
        if n < 0:
            raise ValueError("multiply-add count must be non-negative")
        with self._lock:
            self.multiply_adds += n
            self.by_region[region] += n

    def __enter__(self) -> "FlopCounter":
        with _counters_lock:
            _active_counters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        with _counters_lock:
            _active_counters.remove(self)


@contextlib.contextmanager
def flop_region(name: str):
    token = _region.set(name)
    try:
        yield
    finally:
        _region.reset(token)


def _record(n: int) -> None:
    if _active_counters:
        region = _region.get()
        for c in list(_active_counters):
            c.add(n, region)


# --------------------------------------------------------------------------
# Kernels with contracts
# --------------------------------------------------------------------------


def matmul(a: Mat, b: Mat, transpose_b: bool = False) -> Mat:
    """Exact dense product ``a @ b`` (or ``a @ b.T``), summed in index order."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        dt = np.result_type(a, b)
        a, b = a.astype(dt), b.astype(dt)
    n, k = a.shape
    m = b.shape[1]
    _record(n * m * k)
    if n == 0 or m == 0 or k == 0:
        return np.zeros((n, m), dtype=a.dtype)
    return kernels.kernel("matmul")(np.ascontiguousarray(a), np.ascontiguousarray(b))


def sigmoid(x):
    if np.isscalar(x):
        return float(kernels.sigmoid_numpy(np.array([x], dtype=float))[0])
    return kernels.sigmoid_numpy(np.asarray(x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def row_softmax_stable(a: Mat) -> Mat:
    """Row-wise softmax with max subtraction; ``-inf`` entries map to 0."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ContractError(f"row_softmax_stable expects a 2-D matrix, got {a.shape}")
    if np.isnan(a).any() or np.isposinf(a).any():
        raise ContractError("softmax input contains NaN or +inf")
    if a.shape[1] == 0 or not np.isfinite(a).any(axis=1).all():
        raise ContractError("fully masked row")
    return kernels.kernel("row_softmax")(np.ascontiguousarray(a))


def masked_sigmoid(scores: Mat, allow: np.ndarray) -> Mat:
    """``sigmoid(scores)`` where ``allow`` is set and exactly 0 elsewhere."""
    scores = np.asarray(scores)
    allow = np.asarray(allow, dtype=bool)
    if scores.shape != allow.shape:
        raise ContractError(f"mask shape {allow.shape} does not match scores {scores.shape}")
    if scores.size == 0:
        return np.zeros_like(scores)
    return kernels.kernel("masked_sigmoid")(
        np.ascontiguousarray(scores), np.ascontiguousarray(allow)
    )


# --------------------------------------------------------------------------
# Seeded randomness
# --------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class Rng:
    """SplitMix64 stream.

    The i-th output (1-based) is ``mix(seed + i * 0x9E3779B97F4A7C15)``, so
    a stream is fully determined by its seed and position and can be
    generated in vectorized chunks.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK64
        self.position = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.position + 1, self.position + n + 1, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws on [0, 1) with 53 random bits each."""
        n = int(np.prod(shape))
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * (1.0 / (1 << 53))).reshape(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u1 = 1.0 - self.uniform(half)  # (0, 1]
        u2 = self.uniform(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])
        return (z[:n] * scale).reshape(shape)
