"""CASTLE evaluated token by token, straight from the recurrent definition.

This is the reference every faster engine is checked against. It rebuilds
the lookahead keys from scratch for every prefix and costs O(L^3 d).
"""

from __future__ import annotations

import math

import numpy as np

from castle.masks import MaskKind, build_mu
from castle.num import Mat, masked_sigmoid, matmul, row_softmax_stable, silu
from castle.projections import ProjectedSeq


def lookahead_keys_direct(proj: ProjectedSeq, kind: MaskKind) -> Mat:
    """``U^t`` for the prefix held in ``proj`` (t = proj.length)."""
    t, d = proj.shape
    gate = masked_sigmoid(matmul(proj.q_u, proj.k_u, transpose_b=True) / math.sqrt(d), build_mu(t, kind))
    return matmul(gate, proj.v_u)


def recurrent_weights(proj: ProjectedSeq, kind: MaskKind) -> np.ndarray:
    """Attention weights over the prefix for its last token."""
    t, d = proj.shape
    u = lookahead_keys_direct(proj, kind)
    q = proj.q_c[t - 1 : t]
    s_causal = matmul(q, proj.k_c, transpose_b=True) / math.sqrt(d)
    s_look = matmul(q, u, transpose_b=True) / math.sqrt(d)
    return row_softmax_stable(s_causal - silu(s_look))


def recurrent_step(proj: ProjectedSeq, kind: MaskKind) -> Mat:
    """Output row (1 x d) for the last token of the prefix in ``proj``."""
    return matmul(recurrent_weights(proj, kind), proj.v_c)


def recurrent_full(proj: ProjectedSeq, kind: MaskKind) -> Mat:
    if proj.length < 1:
        raise ValueError("sequence must contain at least one token")
    return np.vstack([recurrent_step(proj.prefix(t), kind) for t in range(1, proj.length + 1)])
