"""Prefill and token-by-token decoding with the UQ-KV cache."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from castle.blockwise import BlockConfig, forward_blockwise
from castle.masks import MaskKind
from castle.num import ContractError, Mat, flop_region, masked_sigmoid, matmul, row_softmax_stable, silu
from castle.projections import HeadParams, ProjectedSeq, project


@dataclass(frozen=True)
class UQKVCache:
    """Decode state: lookahead keys, lookahead queries, causal keys and values.

    Only these four ``t x d`` matrices are kept; the causal query and the
    lookahead key/value of a token are dropped once its step is done.
    """

    u: Mat
    q_u: Mat
    k_c: Mat
    v_c: Mat
    kind: MaskKind

    def __post_init__(self) -> None:
        # update_u_recursive advances (u, q_u) on its own; decode then appends (k_c, v_c)
        if self.u.shape != self.q_u.shape or self.k_c.shape != self.v_c.shape:
            raise ContractError("cache tensors disagree in shape")

    @property
    def t(self) -> int:
        return self.u.shape[0]

    @property
    def dim(self) -> int:
        return self.u.shape[1]

    @property
    def n_numbers(self) -> int:
        return self.u.size + self.q_u.size + self.k_c.size + self.v_c.size

    @classmethod
    def empty(cls, d: int, kind: MaskKind, dtype=np.float64) -> "UQKVCache":
        z = np.zeros((0, d), dtype=dtype)
        return cls(z, z.copy(), z.copy(), z.copy(), kind)


def prefill_lookahead_keys(proj: ProjectedSeq, kind: MaskKind, cfg: BlockConfig) -> Mat:
    """``U^L`` accumulated one row block at a time over key blocks ``j >= k``."""
    L, d = proj.shape
    u = np.zeros((L, d), dtype=proj.q_u.dtype)
    for k in range(cfg.n_blocks):
        rows = cfg.idx(k)
        for j in range(k, cfg.n_blocks):
            cols = cfg.idx(j)
            allow = kind.allows(rows, cols)
            if not allow.any():
                continue
            gate = masked_sigmoid(matmul(proj.q_u[rows], proj.k_u[cols], transpose_b=True) / math.sqrt(d), allow)
            u[rows] += matmul(gate, proj.v_u[cols])
    return u


def prefill(proj: ProjectedSeq, kind: MaskKind, cfg: BlockConfig) -> tuple[Mat, UQKVCache]:
    with flop_region("prefill.cache"):
        u = prefill_lookahead_keys(proj, kind, cfg)
    out, _ = forward_blockwise(proj, kind, cfg)
    cache = UQKVCache(u=u, q_u=proj.q_u.copy(), k_c=proj.k_c.copy(), v_c=proj.v_c.copy(), kind=kind)
    return out, cache


def update_u_recursive(cache: UQKVCache, q_u_t: Mat, k_u_t: Mat, v_u_t: Mat) -> UQKVCache:
    """Extend the lookahead keys by one token; ``k_c``/``v_c`` are left as is.

    Only rows whose mask entry admits the new token are touched; under a
    sliding window the older rows keep their exact previous values.
    """
    q_u_t, k_u_t, v_u_t = (np.atleast_2d(v) for v in (q_u_t, k_u_t, v_u_t))
    prev = cache.t
    d = cache.dim
    u = np.zeros((prev + 1, d), dtype=cache.u.dtype)
    u[:prev] = cache.u
    if prev > 0:
        lo = 0 if cache.kind.window is None else max(0, prev - cache.kind.window)
        rows = np.arange(lo, prev)
        allow = cache.kind.allows(rows, [prev])
        scores = matmul(cache.q_u[lo:], k_u_t, transpose_b=True) / math.sqrt(d)
        gate = masked_sigmoid(scores, allow)
        u[lo:prev] += matmul(gate, v_u_t)
    q_u = np.vstack([cache.q_u, q_u_t])
    return UQKVCache(u=u, q_u=q_u, k_c=cache.k_c, v_c=cache.v_c, kind=cache.kind)


def decode_projected(row: ProjectedSeq, cache: UQKVCache) -> tuple[Mat, UQKVCache]:
    """One decode step from an already projected token (a 1-row ProjectedSeq)."""
    if row.length != 1:
        raise ContractError(f"decode expects a single token, got {row.length}")
    if row.dim != cache.dim:
        raise ContractError(f"token has d={row.dim} but cache has d={cache.dim}")
    d = row.dim
    with flop_region("decode.update"):
        cache = update_u_recursive(cache, row.q_u, row.k_u, row.v_u)
    cache = UQKVCache(
        u=cache.u,
        q_u=cache.q_u,
        k_c=np.vstack([cache.k_c, row.k_c]),
        v_c=np.vstack([cache.v_c, row.v_c]),
        kind=cache.kind,
    )
    with flop_region("decode.combine"):
        s_causal = matmul(row.q_c, cache.k_c, transpose_b=True) / math.sqrt(d)
        s_look = matmul(row.q_c, cache.u, transpose_b=True) / math.sqrt(d)
        p = row_softmax_stable(s_causal - silu(s_look))
        out = matmul(p, cache.v_c)
    return out, cache


def decode_step(x_t: Mat, cache: UQKVCache, params: HeadParams) -> tuple[Mat, UQKVCache]:
    with flop_region("decode.project"):
        row = project(np.atleast_2d(x_t), params)
    return decode_projected(row, cache)
