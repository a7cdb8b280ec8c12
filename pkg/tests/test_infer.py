import math

import numpy as np
import pytest

from castle import (
    BlockConfig,
    HeadParams,
    MaskKind,
    Rng,
    UQKVCache,
    decode_step,
    forward_blockwise,
    lookahead_keys_direct,
    prefill,
    project,
    recurrent_full,
    update_u_recursive,
)
from castle.infer import decode_projected
from castle.verify import decode_step_flops, fit_affine
from conftest import assert_close, random_proj
from oracles import sig


def _setup(seed, L, dh=6, d=3):
    rng = Rng(seed)
    params = HeadParams.random(rng, dh, d)
    x = rng.normal((L, dh))
    return x, params, project(x, params)


def test_prefill_single_token(kind):
    proj = random_proj(0, 1, 3)
    out, cache = prefill(proj, kind, BlockConfig(4, 1))
    assert not cache.u.any() and cache.u.shape == (1, 3)
    assert_close(out, proj.v_c, 1e-15)


@pytest.mark.parametrize("B", [1, 3, 8])
def test_prefill_cache_matches_direct(B, kind):
    proj = random_proj(1, 8, 3)
    _, cache = prefill(proj, kind, BlockConfig(B, 8))
    assert_close(cache.u, lookahead_keys_direct(proj, kind), 1e-12)


def test_prefill_outputs_equal_forward(kind):
    proj = random_proj(2, 9, 3)
    cfg = BlockConfig(4, 9)
    out, _ = prefill(proj, kind, cfg)
    assert np.array_equal(out, forward_blockwise(proj, kind, cfg)[0])


def test_update_first_to_second_token():
    proj = random_proj(3, 2, 3)
    cache = update_u_recursive(UQKVCache.empty(3, MaskKind.castle()), proj.q_u[0], proj.k_u[0], proj.v_u[0])
    cache = update_u_recursive(cache, proj.q_u[1], proj.k_u[1], proj.v_u[1])
    g = sig(float(proj.q_u[0] @ proj.k_u[1]) / math.sqrt(3))
    assert_close(cache.u, np.vstack([g * proj.v_u[1], np.zeros(3)]), 1e-15)


def test_update_swl_leaves_old_rows_bitwise():
    W = 2
    proj = random_proj(4, 10, 3)
    cache = UQKVCache.empty(3, MaskKind.swl(W))
    for t in range(10):
        prev = cache.u.copy()
        cache = update_u_recursive(cache, proj.q_u[t], proj.k_u[t], proj.v_u[t])
        frozen = max(0, t - W)
        assert np.array_equal(cache.u[:frozen], prev[:frozen])


@pytest.mark.parametrize("kind", [MaskKind.castle(), MaskKind.swl(1), MaskKind.swl(5)], ids=str)
def test_recursive_u_tracks_direct(kind):
    proj = random_proj(5, 16, 4)
    cache = UQKVCache.empty(4, kind)
    for t in range(16):
        cache = update_u_recursive(cache, proj.q_u[t], proj.k_u[t], proj.v_u[t])
        assert_close(cache.u, lookahead_keys_direct(proj.prefix(t + 1), kind), 1e-10)
        assert not cache.u[-1].any()


def test_first_decode_is_value(kind):
    x, params, proj = _setup(6, 1)
    o, cache = decode_step(x[0], UQKVCache.empty(3, kind), params)
    assert_close(o, proj.v_c[:1], 1e-15)
    assert cache.t == 1


def test_prefill_then_decode_matches_recurrent(kind):
    L, L0 = 12, 5
    x, params, proj = _setup(7, L)
    ref = recurrent_full(proj, kind)
    _, cache = prefill(proj.prefix(L0), kind, BlockConfig(2, L0))
    for t in range(L0, L):
        o, cache = decode_step(x[t], cache, params)
        assert_close(o[0], ref[t], 1e-10)


def test_every_split_matches_forward(kind):
    L = 9
    proj = random_proj(8, L, 3)
    full, _ = forward_blockwise(proj, kind, BlockConfig(3, L))
    for split in range(L + 1):
        if split:
            out, cache = prefill(proj.prefix(split), kind, BlockConfig(3, split))
            assert_close(out, full[:split], 1e-10)
        else:
            cache = UQKVCache.empty(3, kind)
        for t in range(split, L):
            o, cache = decode_projected(proj.map(lambda m: m[t : t + 1]), cache)
            assert_close(o, full[t : t + 1], 1e-10)
            assert cache.n_numbers == 4 * (t + 1) * 3


def test_cache_holds_only_four_tensors():
    assert [f for f in UQKVCache.__dataclass_fields__] == ["u", "q_u", "k_c", "v_c", "kind"]


def test_decode_is_deterministic(kind):
    x, params, _ = _setup(9, 8)
    caches = []
    for _ in range(2):
        cache = UQKVCache.empty(3, kind)
        for t in range(8):
            _, cache = decode_step(x[t], cache, params)
        caches.append(cache)
    for name in ("u", "q_u", "k_c", "v_c"):
        assert np.array_equal(getattr(caches[0], name), getattr(caches[1], name))


def test_decode_flops_affine_in_t():
    counts = decode_step_flops(64, 4, MaskKind.castle(), d_hidden=16)
    _, _, r2 = fit_affine(np.arange(1, 65), counts)
    assert r2 > 0.999


def test_swl_decode_flops_bounded():
    counts = decode_step_flops(40, 4, MaskKind.swl(3), d_hidden=8)
    # the update touches at most W rows, so only the combine step grows with t
    castle = decode_step_flops(40, 4, MaskKind.castle(), d_hidden=8)
    assert counts[-1] < castle[-1]
