import numpy as np
import pytest

from castle import MaskKind, build_mc, build_mc_tilde, build_mu, build_mu_column


def allowed_set(mask):
    # back to 1-based (row, col) pairs for comparison with hand-listed sets
    return {(i + 1, j + 1) for i, j in zip(*np.nonzero(mask))}


def test_causal_masks_small():
    assert np.array_equal(build_mc(1), [[0.0]])
    assert np.array_equal(build_mc_tilde(1), [[1.0]])
    assert np.array_equal(build_mc(2), [[0.0, -np.inf], [0.0, 0.0]])


def test_causal_masks_match_predicate():
    for L in (3, 7):
        mc, mct = build_mc(L), build_mc_tilde(L)
        for i in range(L):
            for j in range(L):
                assert mc[i, j] == (0.0 if i >= j else -np.inf)
                assert mct[i, j] == (1.0 if i >= j else 0.0)


def test_mu_castle_t3():
    assert allowed_set(build_mu(3, MaskKind.castle())) == {(1, 2), (1, 3), (2, 3)}


def test_mu_swl_window_example():
    mu = build_mu(6, MaskKind.swl(3))
    assert set(np.nonzero(mu[1])[0] + 1) == {3, 4, 5}
    assert set(np.nonzero(mu[3])[0] + 1) == {5, 6}


@pytest.mark.parametrize("kind", [MaskKind.castle(), MaskKind.swl(2)], ids=str)
def test_mu_t1_blocked(kind):
    assert build_mu(1, kind).shape == (1, 1)
    assert not build_mu(1, kind).any()


def test_mu_last_row_blocked():
    for t in range(1, 12):
        for kind in (MaskKind.castle(), MaskKind.swl(1), MaskKind.swl(4)):
            assert not build_mu(t, kind)[t - 1].any()


def test_mu_column_examples():
    assert build_mu_column(4, MaskKind.castle()).all()
    col = build_mu_column(6, MaskKind.swl(2))
    assert list(col) == [False, False, False, True, True]


def test_mu_column_matches_last_column():
    for t in range(2, 17):
        for kind in (MaskKind.castle(), MaskKind.swl(1), MaskKind.swl(3)):
            assert np.array_equal(build_mu_column(t, kind), build_mu(t, kind)[: t - 1, t - 1])


def test_swl_wide_window_equals_castle():
    for t in range(1, 12):
        assert np.array_equal(build_mu(t, MaskKind.swl(max(t - 1, 1))), build_mu(t, MaskKind.castle()))


def test_mu_prefix_property():
    L = 13
    for kind in (MaskKind.castle(), MaskKind.swl(2)):
        full = build_mu(L, kind)
        for t in range(1, L + 1):
            assert np.array_equal(build_mu(t, kind), full[:t, :t])


def test_invalid_window():
    with pytest.raises(ValueError):
        MaskKind.swl(0)
