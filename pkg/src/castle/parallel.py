"""Whole-sequence CASTLE with every L x L intermediate materialized.

``compute_su_naive`` builds the lookahead score matrix with an L x L x L
product, so this path is cubic in L. It exists as the simplest dense
rendering of the parallel form and as a gradient oracle for the tiled
backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from castle.masks import MaskKind, build_mc, build_mc_tilde, build_mu
from castle.num import ContractError, Mat, masked_sigmoid, matmul, row_softmax_stable, silu, silu_grad
from castle.projections import Grads, ProjectedSeq


@dataclass(frozen=True)
class ScoreBundle:
    su: Mat
    logits: Mat
    probs: Mat


def _lookahead_gate(proj: ProjectedSeq, kind: MaskKind) -> Mat:
    L, d = proj.shape
    return masked_sigmoid(
        matmul(proj.q_u, proj.k_u, transpose_b=True) / math.sqrt(d), build_mu(L, kind)
    )


def _masked_low_rank(proj: ProjectedSeq) -> Mat:
    L, d = proj.shape
    x = matmul(proj.q_c, proj.v_u, transpose_b=True) / math.sqrt(d)
    return np.where(build_mc_tilde(L) > 0, x, 0.0)


def compute_su_naive(proj: ProjectedSeq, kind: MaskKind) -> Mat:
    L = proj.length
    su = matmul(_masked_low_rank(proj), _lookahead_gate(proj, kind), transpose_b=True)
    # on/above the diagonal every product term already has a zero factor
    su[np.triu_indices(L)] = 0.0
    return su


def parallel_scores(proj: ProjectedSeq, kind: MaskKind) -> ScoreBundle:
    L, d = proj.shape
    su = compute_su_naive(proj, kind)
    logits = matmul(proj.q_c, proj.k_c, transpose_b=True) / math.sqrt(d) + build_mc(L) - silu(su)
    return ScoreBundle(su=su, logits=logits, probs=row_softmax_stable(logits))


def parallel_forward(proj: ProjectedSeq, kind: MaskKind) -> Mat:
    if proj.length < 1:
        raise ValueError("sequence must contain at least one token")
    return matmul(parallel_scores(proj, kind).probs, proj.v_c)


def standard_causal_forward(q: Mat, k: Mat, v: Mat) -> Mat:
    if not (q.shape == k.shape and q.shape[0] == v.shape[0]):
        raise ContractError(f"shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    L, d = q.shape
    logits = matmul(q, k, transpose_b=True) / math.sqrt(d) + build_mc(L)
    return matmul(row_softmax_stable(logits), v)


def parallel_backward_reference(proj: ProjectedSeq, kind: MaskKind, d_out: Mat) -> Grads:
    """Gradients of ``sum(d_out * O)`` by the dense chain rule."""
    L, d = proj.shape
    if d_out.shape != (L, d):
        raise ContractError(f"d_out shape {d_out.shape} does not match output {(L, d)}")
    scale = 1.0 / math.sqrt(d)
    causal = build_mc_tilde(L) > 0
    allow = build_mu(L, kind)

    x = _masked_low_rank(proj)
    gate = _lookahead_gate(proj, kind)
    su = matmul(x, gate, transpose_b=True)
    su[np.triu_indices(L)] = 0.0
    logits = matmul(proj.q_c, proj.k_c, transpose_b=True) * scale + build_mc(L) - silu(su)
    p = row_softmax_stable(logits)
    out = matmul(p, proj.v_c)

    d_v_c = matmul(p.T, d_out)
    d_p = matmul(d_out, proj.v_c, transpose_b=True)
    delta = np.sum(d_out * out, axis=1, keepdims=True)
    d_logits = p * (d_p - delta)

    d_q_c = matmul(d_logits, proj.k_c) * scale
    d_k_c = matmul(d_logits.T, proj.q_c) * scale

    d_su = -silu_grad(su) * d_logits
    d_x = np.where(causal, matmul(d_su, gate), 0.0)
    d_gate = matmul(d_su.T, x)

    d_q_c = d_q_c + matmul(d_x, proj.v_u) * scale
    d_v_u = matmul(d_x.T, proj.q_c) * scale

    d_pre = np.where(allow, d_gate * gate * (1.0 - gate), 0.0)
    d_q_u = matmul(d_pre, proj.k_u) * scale
    d_k_u = matmul(d_pre.T, proj.q_u) * scale
    return Grads(q_u=d_q_u, k_u=d_k_u, v_u=d_v_u, q_c=d_q_c, k_c=d_k_c, v_c=d_v_c)
