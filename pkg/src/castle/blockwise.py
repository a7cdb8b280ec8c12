"""Tiled O(L^2 d) forward and backward passes.

The sequence is cut into blocks ``T_0 .. T_{N-1}`` of ``block_size`` rows
(the last block may be shorter). The lookahead score matrix is produced
block by block: diagonal blocks directly, and the k-th off-diagonal
blocks from a ``d x L`` accumulator ``D`` that is advanced once per
wavefront. Attention logits are consumed by a streaming softmax, so no
L x L matrix is ever formed.

Wavefront k touches output rows ``T_{j+k}`` and accumulator columns
``T_j`` for each j. Those sets are disjoint inside one wavefront, so the
per-j work may run on a thread pool (``threads > 1`` or the
``CASTLE_THREADS`` environment variable).
"""

from __future__ import annotations

import contextvars
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from castle import kernels
from castle.masks import MaskKind, causal_block
from castle.num import ContractError, Mat, flop_region, masked_sigmoid, matmul, silu, silu_grad
from castle.projections import Grads, ProjectedSeq


@dataclass(frozen=True)
class BlockConfig:
    block_size: int
    length: int

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError(f"block size must be >= 1, got {self.block_size}")
        if self.length < 1:
            raise ValueError(f"sequence length must be >= 1, got {self.length}")

    @property
    def n_blocks(self) -> int:
        return -(-self.length // self.block_size)

    def span(self, i: int) -> slice:
        if not 0 <= i < self.n_blocks:
            raise IndexError(f"block index {i} out of range for {self.n_blocks} blocks")
        return slice(i * self.block_size, min((i + 1) * self.block_size, self.length))

    def idx(self, i: int) -> np.ndarray:
        s = self.span(i)
        return np.arange(s.start, s.stop)


@dataclass(frozen=True)
class SavedForBackward:
    m_final: np.ndarray  # row max folded with log of the normalizer
    d_acc: Mat  # d x L; column block j holds D^(N-1-j)
    out: Mat
    block_size: int
    kind: MaskKind


@dataclass
class WaveRecord:
    """Write set of one kernel instance, for checking wavefront disjointness."""

    k: int
    j: int
    out_rows: tuple[int, int]
    d_cols: tuple[int, int] | None


def default_threads() -> int:
    return max(1, int(os.environ.get("CASTLE_THREADS", "1")))


def _run_wave(fn, items, threads: int) -> None:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        for j in items:
            fn(j)
        return
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        futures = [pool.submit(contextvars.copy_context().run, fn, j) for j in items]
        for f in futures:
            f.result()


def _root_d(proj: ProjectedSeq) -> float:
    return math.sqrt(proj.dim)


def _gate(proj: ProjectedSeq, kind: MaskKind, rows: np.ndarray, cols: np.ndarray) -> Mat:
    """Masked sigmoid of lookahead query ``rows`` against lookahead key ``cols``."""
    allow = kind.allows(rows, cols)
    if not allow.any():
        return np.zeros(allow.shape, dtype=proj.q_u.dtype)
    scores = matmul(proj.q_u[rows], proj.k_u[cols], transpose_b=True) / _root_d(proj)
    return masked_sigmoid(scores, allow)


def _masked_low_rank(proj: ProjectedSeq, rows: np.ndarray) -> Mat:
    x = matmul(proj.q_c[rows], proj.v_u[rows], transpose_b=True) / _root_d(proj)
    return np.where(causal_block(rows, rows), x, 0.0)


def su_diag_block(proj: ProjectedSeq, kind: MaskKind, cfg: BlockConfig, j: int) -> Mat:
    c = cfg.idx(j)
    return matmul(_masked_low_rank(proj, c), _gate(proj, kind, c, c), transpose_b=True)


def update_d(d_prev: Mat, proj: ProjectedSeq, kind: MaskKind, cfg: BlockConfig, j: int, k: int) -> Mat:
    """Advance column block ``T_j`` of the accumulator from step k-1 to k."""
    c, newest = cfg.idx(j), cfg.idx(j + k - 1)
    if not kind.allows(c, newest).any():
        return d_prev
    gate = _gate(proj, kind, c, newest)
    return d_prev + matmul(proj.v_u[newest].T, gate, transpose_b=True)


def su_offdiag_block(
    proj: ProjectedSeq, kind: MaskKind, cfg: BlockConfig, d_k: Mat, j: int, k: int
) -> Mat:
    """Block ``(T_{j+k}, T_j)`` of the lookahead scores, given ``D^(k)[:, T_j]``."""
    r, c = cfg.idx(j + k), cfg.idx(j)
    su = matmul(proj.q_c[r], d_k) / _root_d(proj)
    gate = _gate(proj, kind, c, r)
    if gate.any():
        su = su + matmul(_masked_low_rank(proj, r), gate, transpose_b=True)
    return su


def _logit_block(proj: ProjectedSeq, rows: np.ndarray, cols: np.ndarray, su: Mat) -> Mat:
    s = matmul(proj.q_c[rows], proj.k_c[cols], transpose_b=True) / _root_d(proj)
    return np.where(causal_block(rows, cols), s - silu(su), -np.inf)


def _check_inputs(proj: ProjectedSeq, cfg: BlockConfig) -> None:
    if proj.length != cfg.length:
        raise ContractError(f"block config is for L={cfg.length} but sequence has L={proj.length}")


def forward_blockwise(
    proj: ProjectedSeq,
    kind: MaskKind,
    cfg: BlockConfig,
    threads: int | None = None,
    trace: list | None = None,
) -> tuple[Mat, SavedForBackward]:
    _check_inputs(proj, cfg)
    threads = default_threads() if threads is None else threads
    L, d = proj.shape
    dtype = proj.q_c.dtype
    n = cfg.n_blocks
    out = np.zeros((L, d), dtype=dtype)
    ell = np.zeros(L, dtype=dtype)
    m = np.full(L, -np.inf, dtype=dtype)
    acc = np.zeros((d, L), dtype=dtype)
    rescale = kernels.kernel("online_rescale")

    def softmax_update(r: np.ndarray, c: np.ndarray, a: Mat) -> None:
        rs = slice(r[0], r[-1] + 1)
        m_new, p_tilde, alpha = rescale(np.ascontiguousarray(a), m[rs].copy())
        ell[rs] = alpha * ell[rs] + p_tilde.sum(axis=1)
        out[rs] = alpha[:, None] * out[rs] + matmul(p_tilde, proj.v_c[c])
        m[rs] = m_new

    def diag(j: int) -> None:
        c = cfg.idx(j)
        softmax_update(c, c, _logit_block(proj, c, c, su_diag_block(proj, kind, cfg, j)))
        if trace is not None:
            trace.append(WaveRecord(0, j, (c[0], c[-1] + 1), None))

    def offdiag(k: int, j: int) -> None:
        r, c = cfg.idx(j + k), cfg.idx(j)
        cs = cfg.span(j)
        acc[:, cs] = update_d(acc[:, cs], proj, kind, cfg, j, k)
        su = su_offdiag_block(proj, kind, cfg, acc[:, cs], j, k)
        softmax_update(r, c, _logit_block(proj, r, c, su))
        if trace is not None:
            trace.append(WaveRecord(k, j, (r[0], r[-1] + 1), (cs.start, cs.stop)))

    with flop_region("forward.diagonal"):
        _run_wave(diag, range(n), threads)
    with flop_region("forward.offdiagonal"):
        for k in range(1, n):
            _run_wave(lambda j, k=k: offdiag(k, j), range(n - k), threads)

    out /= ell[:, None]
    m_final = m + np.log(ell)
    saved = SavedForBackward(m_final=m_final, d_acc=acc, out=out.copy(), block_size=cfg.block_size, kind=kind)
    return out, saved


def _grad_through_su_block(proj, kind, r, c, d_su, grads, dvu, dku) -> None:
    """Back-propagate ``d_su`` through the masked low-rank term of block (r, c).

    ``dvu`` / ``dku`` receive the contributions landing on rows ``r``.
    """
    root_d = _root_d(proj)
    gate = _gate(proj, kind, c, r)  # |c| x |r|
    if not gate.any():
        return
    x = _masked_low_rank(proj, r)
    e = np.where(causal_block(r, r), matmul(d_su, gate), 0.0)
    f = matmul(d_su.T, x) * gate * (1.0 - gate)
    grads.q_c[r] += matmul(e, proj.v_u[r]) / root_d
    dvu[r] += matmul(e.T, proj.q_c[r]) / root_d
    grads.q_u[c] += matmul(f, proj.k_u[r]) / root_d
    dku[r] += matmul(f.T, proj.q_u[c]) / root_d


def _grad_through_d_update(proj, kind, c, newest, d_acc_grad, grads, dvu, dku) -> None:
    """Back-propagate ``dD[:, c]`` through one accumulator update."""
    root_d = _root_d(proj)
    gate = _gate(proj, kind, c, newest)  # |c| x |newest|
    if not gate.any():
        return
    dvu[newest] += matmul(gate.T, d_acc_grad, transpose_b=True)
    g = matmul(d_acc_grad.T, proj.v_u[newest], transpose_b=True) * gate * (1.0 - gate)
    grads.q_u[c] += matmul(g, proj.k_u[newest]) / root_d
    dku[newest] += matmul(g.T, proj.q_u[c]) / root_d


def backward_blockwise(
    proj: ProjectedSeq,
    kind: MaskKind,
    cfg: BlockConfig,
    saved: SavedForBackward,
    d_out: Mat,
    threads: int | None = None,
    return_walked_d: bool = False,
):
    """Gradients of ``sum(d_out * O)`` with respect to all six projections.

    Blocks are visited in reverse wavefront order and every score block is
    recomputed from the projections and the accumulator, which is walked
    back one step per wavefront. With ``return_walked_d`` the fully
    walked-back accumulator is returned as well (it should be zero).
    """
    _check_inputs(proj, cfg)
    L, d = proj.shape
    if d_out.shape != (L, d):
        raise ContractError(f"d_out shape {d_out.shape} does not match output {(L, d)}")
    if (
        saved.block_size != cfg.block_size
        or saved.kind != kind
        or saved.m_final.shape != (L,)
        or saved.d_acc.shape != (d, L)
        or saved.out.shape != (L, d)
    ):
        raise ContractError("saved forward state does not match these inputs")
    threads = default_threads() if threads is None else threads
    root_d = _root_d(proj)
    dtype = proj.q_c.dtype
    n = cfg.n_blocks

    acc = saved.d_acc.copy()
    m = saved.m_final
    delta = np.sum(d_out * saved.out, axis=1)
    d_acc = np.zeros((d, L), dtype=dtype)
    grads = Grads.zeros(L, d, dtype)
    if threads > 1:
        # rows T_{j+k} of one instance are rows T_{(j+1)+k-1} of its neighbour
        dvu_hat, dvu_tilde = np.zeros((L, d), dtype), np.zeros((L, d), dtype)
        dku_hat, dku_tilde = np.zeros((L, d), dtype), np.zeros((L, d), dtype)
    else:
        dvu_hat = dvu_tilde = grads.v_u
        dku_hat = dku_tilde = grads.k_u

    def causal_part(r, c, su):
        a = _logit_block(proj, r, c, su)
        p = np.exp(a - m[r][:, None])
        do_r = d_out[r]
        dp = matmul(do_r, proj.v_c[c], transpose_b=True)
        grads.v_c[c] += matmul(p.T, do_r)
        ds_c = p * (dp - delta[r][:, None])
        grads.q_c[r] += matmul(ds_c, proj.k_c[c]) / root_d
        grads.k_c[c] += matmul(ds_c.T, proj.q_c[r]) / root_d
        return -silu_grad(su) * ds_c

    def offdiag(k: int, j: int) -> None:
        r, c, newest = cfg.idx(j + k), cfg.idx(j), cfg.idx(j + k - 1)
        cs = cfg.span(j)
        d_k = acc[:, cs]
        su = su_offdiag_block(proj, kind, cfg, d_k, j, k)
        d_su = causal_part(r, c, su)
        grads.q_c[r] += matmul(d_su, d_k, transpose_b=True) / root_d
        d_acc[:, cs] += matmul(proj.q_c[r].T, d_su) / root_d
        _grad_through_su_block(proj, kind, r, c, d_su, grads, dvu_hat, dku_hat)
        _grad_through_d_update(proj, kind, c, newest, d_acc[:, cs], grads, dvu_tilde, dku_tilde)
        gate = _gate(proj, kind, c, newest)
        if gate.any():
            acc[:, cs] = d_k - matmul(proj.v_u[newest].T, gate, transpose_b=True)

    def diag(j: int) -> None:
        c = cfg.idx(j)
        d_su = causal_part(c, c, su_diag_block(proj, kind, cfg, j))
        _grad_through_su_block(proj, kind, c, c, d_su, grads, dvu_hat, dku_hat)

    with flop_region("backward.offdiagonal"):
        for k in range(n - 1, 0, -1):
            _run_wave(lambda j, k=k: offdiag(k, j), range(n - k), threads)
    with flop_region("backward.diagonal"):
        _run_wave(diag, range(n), threads)

    if threads > 1:
        grads.v_u[:] = dvu_hat + dvu_tilde
        grads.k_u[:] = dku_hat + dku_tilde
    if return_walked_d:
        return grads, acc
    return grads
