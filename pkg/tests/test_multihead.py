import numpy as np
import pytest

from castle import (
    Arch,
    ContractError,
    HeadParams,
    MaskKind,
    MultiHeadParams,
    Rng,
    multihead_decode_step,
    multihead_forward,
    param_count,
    project,
    recurrent_full,
)
from castle.multihead import init_caches
from conftest import assert_close


def _params(seed, n=2, dh=6, d=3):
    return MultiHeadParams.random(Rng(seed), n, dh, d)


def test_single_head_identity_output():
    rng = Rng(0)
    head = HeadParams.random(rng, 3, 3)
    p = MultiHeadParams((head,), np.eye(3))
    x = rng.normal((5, 3))
    kind = MaskKind.castle()
    assert_close(multihead_forward(x, p, kind, "recurrent"), recurrent_full(project(x, head), kind), 1e-15)


@pytest.mark.parametrize("engine", ["parallel", "blockwise", "decode"])
def test_engines_agree(engine, kind):
    p = _params(1)
    x = Rng(2).normal((8, 6))
    ref = multihead_forward(x, p, kind, "recurrent")
    assert_close(multihead_forward(x, p, kind, engine, block_size=3), ref, 1e-10)


def test_zero_output_projection():
    p = _params(3)
    p = MultiHeadParams(p.heads, np.zeros_like(p.w_o))
    assert not multihead_forward(Rng(4).normal((5, 6)), p, MaskKind.castle()).any()


def test_decode_matches_forward_rows(kind):
    p = _params(5)
    x = Rng(6).normal((7, 6))
    full = multihead_forward(x, p, kind, "blockwise", block_size=2)
    caches = init_caches(p, kind)
    for t in range(7):
        o, caches = multihead_decode_step(x[t], caches, p)
        assert_close(o[0], full[t], 1e-10)


def test_decode_zero_first_token():
    p = _params(7)
    o, _ = multihead_decode_step(np.zeros(6), init_caches(p, MaskKind.castle()), p)
    assert not o.any()


def test_zero_second_head_uses_top_block_only():
    rng = Rng(8)
    h1 = HeadParams.random(rng, 6, 3)
    w_o = rng.normal((6, 6))
    p = MultiHeadParams((h1, HeadParams.zeros(6, 3)), w_o)
    x = rng.normal((4, 6))
    kind = MaskKind.castle()
    caches = init_caches(p, kind)
    single = MultiHeadParams((h1,), w_o[:3])
    single_caches = init_caches(single, kind)
    for t in range(4):
        o, caches = multihead_decode_step(x[t], caches, p)
        o1, single_caches = multihead_decode_step(x[t], single_caches, single)
        assert_close(o, o1, 1e-15)


def test_head_independence():
    p = _params(9, n=3)
    x = Rng(10).normal((6, 6))
    kind = MaskKind.swl(2)
    base = [recurrent_full(project(x, h), kind) for h in p.heads]
    heads = list(p.heads)
    heads[1] = HeadParams.zeros(6, 3)
    changed = [recurrent_full(project(x, h), kind) for h in heads]
    assert np.array_equal(changed[0], base[0]) and np.array_equal(changed[2], base[2])
    assert not np.array_equal(changed[1], base[1])


def test_decode_rejects_misaligned_caches():
    p = _params(11)
    caches = init_caches(p, MaskKind.castle())
    _, advanced = multihead_decode_step(np.ones(6), caches, p)
    with pytest.raises(ContractError):
        multihead_decode_step(np.ones(6), [advanced[0], caches[1]], p)
    with pytest.raises(ContractError):
        multihead_decode_step(np.ones(6), caches[:1], p)


def test_unknown_engine():
    with pytest.raises(ContractError):
        multihead_forward(np.ones((2, 6)), _params(12), MaskKind.castle(), "flash")


def test_param_counts_table_configs():
    small_c = param_count(Arch.CASTLE, 8, 64, 896)
    small_s = param_count(Arch.STANDARD_CAUSAL, 14, 64, 896)
    assert small_c == small_s == 3_211_264
    med_c = param_count("castle", 9, 64, 1024)
    med_s = param_count("standard", 16, 64, 1024)
    assert med_c == 4_128_768 and med_s == 4_194_304 and med_c < med_s


@pytest.mark.parametrize("n", [1, 4, 7, 12])
def test_param_ratio(n):
    assert 4 * param_count("castle", n, 32, 256) == 7 * param_count("standard", n, 32, 256)


def test_param_parity_relation():
    for n_c in range(1, 30):
        for n_s in range(1, 50):
            equal = param_count("castle", n_c, 8, 16) == param_count("standard", n_s, 8, 16)
            assert equal == (7 * n_c == 4 * n_s)
