import numpy as np
import pytest

from castle import MaskKind, ProjectedSeq, Rng

KINDS = [MaskKind.castle(), MaskKind.swl(1), MaskKind.swl(3)]


@pytest.fixture(params=KINDS, ids=str)
def kind(request):
    return request.param


def random_proj(seed: int, L: int, d: int) -> ProjectedSeq:
    return ProjectedSeq.random(Rng(seed), L, d)


@pytest.fixture
def rng():
    return Rng(1234)


def assert_close(a, b, atol):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    err = float(np.max(np.abs(a - b), initial=0.0))
    assert err < atol, f"max abs err {err:.3e} >= {atol:.1e}"
