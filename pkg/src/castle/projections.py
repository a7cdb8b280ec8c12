"""Per-head projections and their gradients."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from castle.num import ContractError, Mat, Rng, matmul

NAMES = ("q_u", "k_u", "v_u", "q_c", "k_c", "v_c")


class _SixMats:
    q_u: Mat
    k_u: Mat
    v_u: Mat
    q_c: Mat
    k_c: Mat
    v_c: Mat

    def __post_init__(self) -> None:
        shapes = {np.shape(getattr(self, f.name)) for f in fields(self)}
        if len(shapes) != 1:
            raise ContractError(f"all six matrices must share one shape, got {shapes}")
        shape = shapes.pop()
        if len(shape) != 2:
            raise ContractError(f"expected 2-D matrices, got shape {shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.q_u.shape

    def as_dict(self) -> dict[str, Mat]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def map(self, fn):
        return type(self)(**{k: fn(v) for k, v in self.as_dict().items()})

    def max_abs_diff(self, other) -> float:
        return max(
            float(np.max(np.abs(a - b), initial=0.0))
            for a, b in zip(self.as_dict().values(), other.as_dict().values())
        )


@dataclass(frozen=True)
class ProjectedSeq(_SixMats):
    """The six ``L x d`` projections of one head over a sequence."""

    q_u: Mat
    k_u: Mat
    v_u: Mat
    q_c: Mat
    k_c: Mat
    v_c: Mat

    @property
    def length(self) -> int:
        return self.q_u.shape[0]

    @property
    def dim(self) -> int:
        return self.q_u.shape[1]

    def prefix(self, t: int) -> "ProjectedSeq":
        return self.map(lambda m: m[:t])

    def astype(self, dtype) -> "ProjectedSeq":
        return self.map(lambda m: np.ascontiguousarray(m, dtype=dtype))

    @classmethod
    def random(cls, rng: Rng, L: int, d: int, scale: float = 1.0) -> "ProjectedSeq":
        return cls(*(rng.normal((L, d), scale) for _ in NAMES))


@dataclass(frozen=True)
class Grads(_SixMats):
    """Gradients of a scalar loss with respect to each projection."""

    q_u: Mat
    k_u: Mat
    v_u: Mat
    q_c: Mat
    k_c: Mat
    v_c: Mat

    @classmethod
    def zeros(cls, L: int, d: int, dtype=np.float64) -> "Grads":
        return cls(*(np.zeros((L, d), dtype=dtype) for _ in NAMES))


@dataclass(frozen=True)
class HeadParams:
    """Projection weights of one head, each ``d_hidden x d``."""

    w_q_u: Mat
    w_k_u: Mat
    w_v_u: Mat
    w_q_c: Mat
    w_k_c: Mat
    w_v_c: Mat

    def __post_init__(self) -> None:
        shapes = {np.shape(getattr(self, f.name)) for f in fields(self)}
        if len(shapes) != 1:
            raise ContractError(f"all six weights must share one shape, got {shapes}")

    @property
    def d_hidden(self) -> int:
        return self.w_q_u.shape[0]

    @property
    def dim(self) -> int:
        return self.w_q_u.shape[1]

    def weights(self) -> tuple[Mat, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    @classmethod
    def random(cls, rng: Rng, d_hidden: int, d: int) -> "HeadParams":
        # unit-variance inputs then give unit-scale projections
        scale = 1.0 / np.sqrt(d_hidden)
        return cls(*(rng.normal((d_hidden, d), scale) for _ in NAMES))

    @classmethod
    def zeros(cls, d_hidden: int, d: int) -> "HeadParams":
        return cls(*(np.zeros((d_hidden, d)) for _ in NAMES))


def project(x: Mat, p: HeadParams) -> ProjectedSeq:
    x = np.atleast_2d(x)
    if x.shape[1] != p.d_hidden:
        raise ContractError(
            f"input has {x.shape[1]} columns but weights expect d_hidden={p.d_hidden}"
        )
    return ProjectedSeq(*(matmul(x, w) for w in p.weights()))
