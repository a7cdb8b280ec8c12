import math

import numpy as np
import pytest

from castle import (
    MaskKind,
    ProjectedSeq,
    Rng,
    build_mu,
    compute_su_naive,
    masked_sigmoid,
    matmul,
    parallel_backward_reference,
    parallel_forward,
    recurrent_full,
    standard_causal_forward,
)
from castle.parallel import parallel_scores
from castle.recurrent import lookahead_keys_direct
from castle.verify import finite_diff_grad, rel_err
from conftest import assert_close, random_proj
from oracles import causal_attention_rows, sig


def test_su_single_token(kind):
    assert np.array_equal(compute_su_naive(random_proj(0, 1, 3), kind), [[0.0]])


def test_su_two_tokens_hand_expansion():
    proj = random_proj(1, 2, 3)
    su = compute_su_naive(proj, MaskKind.castle())
    d = 3
    expected = float(proj.q_c[1] @ proj.v_u[1]) / math.sqrt(d) * sig(float(proj.q_u[0] @ proj.k_u[1]) / math.sqrt(d))
    assert abs(su[1, 0] - expected) < 1e-15
    assert su[0, 0] == su[0, 1] == su[1, 1] == 0.0


def test_su_rows_are_stacked_recurrent_scores(kind):
    # row t of S^U is q^C_t (U^t)^T / sqrt(d), zero-padded to length L
    proj = random_proj(2, 6, 3)
    su = compute_su_naive(proj, kind)
    for t in range(1, 7):
        u = lookahead_keys_direct(proj.prefix(t), kind)
        row = (proj.q_c[t - 1] @ u.T) / math.sqrt(3)
        assert_close(su[t - 1, :t], row, 1e-14)
        assert not su[t - 1, t:].any()


@pytest.mark.parametrize("L", [1, 2, 5, 17, 32])
def test_su_strictly_lower_triangular(L, kind):
    su = compute_su_naive(random_proj(L, L, 2), kind)
    assert not su[np.triu_indices(L)].any()


def test_prefix_block_of_gate(kind):
    proj = random_proj(3, 11, 3)
    full = masked_sigmoid(matmul(proj.q_u, proj.k_u, transpose_b=True) / math.sqrt(3), build_mu(11, kind))
    for t in range(1, 12):
        p = proj.prefix(t)
        part = masked_sigmoid(matmul(p.q_u, p.k_u, transpose_b=True) / math.sqrt(3), build_mu(t, kind))
        assert np.array_equal(part, full[:t, :t])


def test_parallel_single_token(kind):
    proj = random_proj(4, 1, 3)
    assert_close(parallel_forward(proj, kind), proj.v_c, 1e-15)


def test_parallel_zero_lookahead_is_standard():
    proj = random_proj(5, 7, 3)
    z = np.zeros_like(proj.q_u)
    flat = ProjectedSeq(z, z, z, proj.q_c, proj.k_c, proj.v_c)
    assert np.array_equal(parallel_forward(flat, MaskKind.castle()), standard_causal_forward(proj.q_c, proj.k_c, proj.v_c))


@pytest.mark.parametrize("kind", [MaskKind.castle(), MaskKind.swl(3)], ids=str)
def test_parallel_matches_recurrent(kind):
    proj = random_proj(6, 8, 4)
    assert_close(parallel_forward(proj, kind), recurrent_full(proj, kind), 1e-12)


def test_standard_causal_examples():
    rng = Rng(7)
    v = rng.normal((1, 3))
    assert_close(standard_causal_forward(rng.normal((1, 3)), rng.normal((1, 3)), v), v, 1e-15)
    L = 6
    k = np.tile(rng.normal((1, 3)), (L, 1))
    v = rng.normal((L, 3))
    running_mean = np.cumsum(v, axis=0) / np.arange(1, L + 1)[:, None]
    assert_close(standard_causal_forward(rng.normal((L, 3)), k, v), running_mean, 1e-14)


def test_standard_causal_matches_row_oracle():
    rng = Rng(8)
    q, k, v = rng.normal((5, 3)), rng.normal((5, 3)), rng.normal((5, 3))
    assert_close(standard_causal_forward(q, k, v), causal_attention_rows(q, k, v), 1e-13)


def test_probs_rows_sum_to_one(kind):
    b = parallel_scores(random_proj(9, 12, 3), kind)
    assert np.max(np.abs(b.probs.sum(axis=1) - 1)) < 1e-12


def test_softmax_shift_robustness(kind):
    from castle import row_softmax_stable

    b = parallel_scores(random_proj(10, 9, 3), kind)
    shifts = Rng(1).normal((9, 1)) * 50
    assert_close(row_softmax_stable(b.logits + shifts), b.probs, 1e-12)


def test_backward_reference_zero_upstream(kind):
    proj = random_proj(11, 6, 3)
    g = parallel_backward_reference(proj, kind, np.zeros((6, 3)))
    assert all(not m.any() for m in g.as_dict().values())


@pytest.mark.parametrize("kind", [MaskKind.castle(), MaskKind.swl(2)], ids=str)
def test_backward_reference_finite_differences(kind):
    proj = random_proj(12, 6, 3)
    weights = Rng(13).normal((6, 3))
    g = parallel_backward_reference(proj, kind, weights)
    for name, m in proj.as_dict().items():
        def loss(x, name=name):
            return float(np.sum(parallel_forward(ProjectedSeq(**{**proj.as_dict(), name: x}), kind) * weights))
        fd = finite_diff_grad(loss, m, 1e-5)
        assert rel_err(getattr(g, name), fd) < 1e-6, name
