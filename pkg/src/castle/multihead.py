"""Multi-head composition and parameter accounting."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from castle.blockwise import BlockConfig, forward_blockwise
from castle.infer import UQKVCache, decode_step
from castle.masks import MaskKind
from castle.num import ContractError, Mat, Rng, matmul
from castle.parallel import parallel_forward
from castle.projections import HeadParams, project
from castle.recurrent import recurrent_full

ENGINES = ("recurrent", "parallel", "blockwise", "decode")


class Arch(enum.Enum):
    CASTLE = "castle"
    STANDARD_CAUSAL = "standard"


@dataclass(frozen=True)
class MultiHeadParams:
    heads: tuple[HeadParams, ...]
    w_o: Mat  # (n * d) x d_hidden

    def __post_init__(self) -> None:
        if not self.heads:
            raise ContractError("at least one head is required")
        dims = {(h.d_hidden, h.dim) for h in self.heads}
        if len(dims) != 1:
            raise ContractError(f"heads disagree on (d_hidden, d): {dims}")
        if self.w_o.shape != (self.n_heads * self.dim, self.d_hidden):
            raise ContractError(
                f"w_o must be {(self.n_heads * self.dim, self.d_hidden)}, got {self.w_o.shape}"
            )

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def dim(self) -> int:
        return self.heads[0].dim

    @property
    def d_hidden(self) -> int:
        return self.heads[0].d_hidden

    @classmethod
    def random(cls, rng: Rng, n: int, d_hidden: int, d: int) -> "MultiHeadParams":
        heads = tuple(HeadParams.random(rng, d_hidden, d) for _ in range(n))
        return cls(heads, rng.normal((n * d, d_hidden), 1.0 / np.sqrt(n * d)))


def _head_output(x: Mat, head: HeadParams, kind: MaskKind, engine: str, block_size: int | None) -> Mat:
    if engine == "decode":
        cache = UQKVCache.empty(head.dim, kind, x.dtype)
        rows = []
        for t in range(x.shape[0]):
            o, cache = decode_step(x[t : t + 1], cache, head)
            rows.append(o)
        return np.vstack(rows)
    proj = project(x, head)
    if engine == "recurrent":
        return recurrent_full(proj, kind)
    if engine == "parallel":
        return parallel_forward(proj, kind)
    if engine == "blockwise":
        cfg = BlockConfig(block_size or x.shape[0], x.shape[0])
        return forward_blockwise(proj, kind, cfg)[0]
    raise ContractError(f"unknown engine {engine!r}; expected one of {ENGINES}")


def multihead_forward(
    x: Mat, p: MultiHeadParams, kind: MaskKind, engine: str = "blockwise", block_size: int | None = None
) -> Mat:
    x = np.atleast_2d(x)
    if x.shape[1] != p.d_hidden:
        raise ContractError(f"input has {x.shape[1]} features, params expect {p.d_hidden}")
    concat = np.hstack([_head_output(x, h, kind, engine, block_size) for h in p.heads])
    return matmul(concat, p.w_o)


def init_caches(p: MultiHeadParams, kind: MaskKind) -> list[UQKVCache]:
    return [UQKVCache.empty(p.dim, kind) for _ in p.heads]


def multihead_decode_step(x_t: Mat, caches: list[UQKVCache], p: MultiHeadParams) -> tuple[Mat, list[UQKVCache]]:
    if len(caches) != p.n_heads:
        raise ContractError(f"got {len(caches)} caches for {p.n_heads} heads")
    if len({c.t for c in caches}) != 1:
        raise ContractError("caches are not aligned at the same length")
    outs, new_caches = [], []
    for head, cache in zip(p.heads, caches):
        o, c = decode_step(x_t, cache, head)
        outs.append(o)
        new_caches.append(c)
    return matmul(np.hstack(outs), p.w_o), new_caches


def param_count(arch: Arch | str, n: int, d: int, d_hidden: int) -> int:
    """Learnable weights of one attention layer, output projection included.

    CASTLE has six input projections per head plus its share of W^O;
    standard attention has three plus its share.
    """
    arch = Arch(arch)
    if min(n, d, d_hidden) < 1:
        raise ValueError("n, d and d_hidden must be positive")
    per_head = 7 if arch is Arch.CASTLE else 4
    return per_head * n * d * d_hidden
