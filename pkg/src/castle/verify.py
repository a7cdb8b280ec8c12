"""Equivalence suites, gradient checks and FLOP/runtime benchmarks.

Every check produces a :class:`Report`. Report dictionaries carry exactly
the keys in ``REPORT_FIELDS``; bench rows carry ``BENCH_FIELDS``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from castle.blockwise import BlockConfig, backward_blockwise, forward_blockwise
from castle.infer import UQKVCache, decode_projected, prefill, update_u_recursive
from castle.masks import MaskKind
from castle.multihead import MultiHeadParams, multihead_forward
from castle.num import FlopCounter, Mat, Rng
from castle.parallel import parallel_backward_reference, parallel_forward, standard_causal_forward
from castle.projections import NAMES, Grads, ProjectedSeq, project
from castle.recurrent import lookahead_keys_direct, recurrent_full

REPORT_FIELDS = ("test", "L", "d", "n", "B", "mode", "window", "seed",
                 "max_abs_err", "max_rel_err", "flops", "wall_ms", "pass")

BENCH_FIELDS = ("engine", "L", "d", "B", "precision", "backend", "flops", "wall_ms",
                "std_flops", "std_wall_ms")

# denominator floor for relative errors, so entries that are zero in both
# operands do not blow up the ratio
REL_FLOOR = 1e-3


@dataclass(frozen=True)
class Tolerances:
    forward: float = 1e-10
    blockwise: float = 1e-11
    grad: float = 1e-9
    fd_rel: float = 1e-6
    fd_eps: float = 1e-5


@dataclass(frozen=True)
class SuiteConfig:
    seq_len: int = 16
    dim: int = 4
    heads: int = 2
    block_size: int = 4
    mode: str = "castle"
    window: int = 4
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    precision: str = "f64"
    d_hidden: int | None = None
    tol: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self) -> None:
        for name in ("seq_len", "dim", "heads", "block_size", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode not in ("castle", "swl"):
            raise ValueError(f"mode must be 'castle' or 'swl', got {self.mode!r}")
        if self.precision not in ("f64", "f32"):
            raise ValueError(f"precision must be 'f64' or 'f32', got {self.precision!r}")

    @property
    def kind(self) -> MaskKind:
        return MaskKind.castle() if self.mode == "castle" else MaskKind.swl(self.window)

    @property
    def hidden(self) -> int:
        return self.d_hidden or self.heads * self.dim

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


@dataclass
class Report:
    test: str
    cfg: SuiteConfig
    seed: int
    max_abs_err: float
    max_rel_err: float
    flops: int
    wall_ms: float
    passed: bool
    block_size: int | None = None

    def as_dict(self) -> dict:
        return {
            "test": self.test,
            "L": self.cfg.seq_len,
            "d": self.cfg.dim,
            "n": self.cfg.heads,
            "B": self.block_size if self.block_size is not None else self.cfg.block_size,
            "mode": self.cfg.mode,
            "window": self.cfg.window if self.cfg.mode == "swl" else None,
            "seed": self.seed,
            "max_abs_err": float(self.max_abs_err),
            "max_rel_err": float(self.max_rel_err),
            "flops": int(self.flops),
            "wall_ms": round(float(self.wall_ms), 3),
            "pass": bool(self.passed),
        }


def abs_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b), initial=0.0))


def rel_err(a, b, floor: float = REL_FLOOR) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom, initial=0.0))


def _grads_err(g1: Grads, g2: Grads, fn) -> float:
    return max(fn(a, b) for a, b in zip(g1.as_dict().values(), g2.as_dict().values()))


def finite_diff_grad(loss: Callable[[Mat], float], x: Mat, eps: float = 1e-5) -> Mat:
    """Central-difference gradient of a scalar function of a matrix."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss(x))
        flat[i] = orig - eps
        down = float(loss(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        gflat[i] = (up - down) / (2 * eps)
    return grad


def castle_fd_grads(proj: ProjectedSeq, kind: MaskKind, cfg: BlockConfig, weights: Mat, eps: float) -> Grads:
    """Finite-difference gradients of ``sum(O * weights)`` for every projection."""
    out = {}
    for name in NAMES:
        def loss(m, name=name):
            p = ProjectedSeq(**{**proj.as_dict(), name: m})
            return float(np.sum(forward_blockwise(p, kind, cfg, threads=1)[0] * weights))
        out[name] = finite_diff_grad(loss, getattr(proj, name), eps)
    return Grads(**out)


# --------------------------------------------------------------------------
# Suites
# --------------------------------------------------------------------------


class _Timer:
    def __enter__(self):
        self.flops = FlopCounter().__enter__()
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = (time.perf_counter() - self.t0) * 1e3
        self.flops.__exit__(*exc)


def _instance(cfg: SuiteConfig, seed: int):
    rng = Rng(seed)
    x = rng.normal((cfg.seq_len, cfg.hidden))
    params = MultiHeadParams.random(rng, cfg.heads, cfg.hidden, cfg.dim)
    projs = [project(x, h) for h in params.heads]
    return x, params, projs


def block_sweep(L: int, extra: Iterable[int] = ()) -> list[int]:
    return sorted({b for b in (1, 2, 3, 5, max(1, L // 2), L, *extra) if 1 <= b <= L})


def run_equivalence_suite(cfg: SuiteConfig) -> list[Report]:
    if cfg.precision != "f64":
        raise ValueError("equivalence tolerances require f64; f32 is for benchmarks only")
    reports: list[Report] = []
    kind, L, tol = cfg.kind, cfg.seq_len, cfg.tol

    def add(test, seed, checks, abs_tol=None, block_size=None, exact=False):
        with _Timer() as tm:
            pairs = list(checks())
        a = max((abs_err(x, y) for x, y in pairs), default=0.0)
        r = max((rel_err(x, y) for x, y in pairs), default=0.0)
        ok = a == 0.0 if exact else a < abs_tol
        reports.append(Report(test, cfg, seed, a, r, tm.flops.multiply_adds, tm.ms, ok, block_size))

    for seed in cfg.seeds:
        x, params, projs = _instance(cfg, seed)
        par = [parallel_forward(p, kind) for p in projs]

        add("recurrent_vs_parallel", seed,
            lambda: ((recurrent_full(p, kind), parallel_forward(p, kind)) for p in projs), tol.forward)

        for b in block_sweep(L, (cfg.block_size,)):
            bc = BlockConfig(b, L)
            add("parallel_vs_blockwise", seed,
                lambda bc=bc: ((par[h], forward_blockwise(p, kind, bc)[0]) for h, p in enumerate(projs)),
                tol.blockwise, block_size=b)

        bc = BlockConfig(cfg.block_size, L)

        def train_vs_decode():
            for p in projs:
                full, _ = forward_blockwise(p, kind, bc)
                for split in range(L + 1):
                    yield from _split_decode_pairs(p, kind, cfg.block_size, split, full)

        add("train_vs_decode", seed, train_vs_decode, tol.forward)

        def direct_vs_recursive_u():
            for p in projs:
                cache = UQKVCache.empty(p.dim, kind)
                for t in range(L):
                    cache = update_u_recursive(cache, p.q_u[t], p.k_u[t], p.v_u[t])
                    yield cache.u, lookahead_keys_direct(p.prefix(t + 1), kind)

        add("direct_u_vs_recursive_u", seed, direct_vs_recursive_u, tol.forward)

        wide = MaskKind.swl(max(L - 1, 1))
        add("castle_vs_swl_wide", seed,
            lambda: ((recurrent_full(p, MaskKind.castle()), recurrent_full(p, wide)) for p in projs),
            exact=True)

        rng = Rng(seed + 10_000)
        d_outs = [rng.normal(p.shape) for p in projs]

        def grads_vs_dense():
            for p, d_out in zip(projs, d_outs):
                _, saved = forward_blockwise(p, kind, bc)
                g = backward_blockwise(p, kind, bc, saved, d_out)
                ref = parallel_backward_reference(p, kind, d_out)
                for name in NAMES:
                    yield getattr(g, name), getattr(ref, name)

        add("grad_blockwise_vs_dense", seed, grads_vs_dense, tol.grad)

        add("multihead_recurrent_vs_blockwise", seed,
            lambda: [(multihead_forward(x, params, kind, "recurrent"),
                      multihead_forward(x, params, kind, "blockwise", cfg.block_size))],
            tol.forward)

    return reports


def _split_decode_pairs(p: ProjectedSeq, kind: MaskKind, block_size: int, split: int, full: Mat):
    if split > 0:
        head_out, cache = prefill(p.prefix(split), kind, BlockConfig(block_size, split))
        yield head_out, full[:split]
    else:
        cache = UQKVCache.empty(p.dim, kind)
    for t in range(split, p.length):
        o, cache = decode_projected(p.map(lambda m, t=t: m[t : t + 1]), cache)
        yield o, full[t : t + 1]


def run_gradcheck(cfg: SuiteConfig) -> list[Report]:
    """Blockwise backward against the dense chain rule and finite differences."""
    if cfg.precision != "f64":
        raise ValueError("gradient checks require f64")
    reports = []
    kind, tol = cfg.kind, cfg.tol
    bc = BlockConfig(cfg.block_size, cfg.seq_len)
    for seed in cfg.seeds:
        _, _, projs = _instance(cfg, seed)
        rng = Rng(seed + 10_000)
        for h, p in enumerate(projs):
            weights = rng.normal(p.shape)
            with _Timer() as tm:
                _, saved = forward_blockwise(p, kind, bc)
                g = backward_blockwise(p, kind, bc, saved, weights)
            ref = parallel_backward_reference(p, kind, weights)
            a = _grads_err(g, ref, abs_err)
            reports.append(Report("grad_blockwise_vs_dense", cfg, seed, a, _grads_err(g, ref, rel_err),
                                  tm.flops.multiply_adds, tm.ms, a < tol.grad))
            t0 = time.perf_counter()
            fd = castle_fd_grads(p, kind, bc, weights, tol.fd_eps)
            ms = (time.perf_counter() - t0) * 1e3
            r = _grads_err(g, fd, rel_err)
            reports.append(Report("grad_blockwise_vs_fd", cfg, seed, _grads_err(g, fd, abs_err), r,
                                  0, ms, r < tol.fd_rel))
    return reports


# --------------------------------------------------------------------------
# Benchmarks
# --------------------------------------------------------------------------


def count_flops(fn, *args, warmup: bool = False, **kwargs) -> tuple[int, float, object]:
    if warmup:
        fn(*args, **kwargs)  # keep JIT compilation out of the timing
    with _Timer() as tm:
        result = fn(*args, **kwargs)
    return tm.flops.multiply_adds, tm.ms, result


def decode_step_flops(L: int, d: int, kind: MaskKind, seed: int = 0, d_hidden: int | None = None) -> list[int]:
    """Multiply-adds spent by each decode step t = 1..L on a random sequence."""
    from castle.infer import decode_step
    from castle.projections import HeadParams

    rng = Rng(seed)
    d_hidden = d_hidden or d
    params = HeadParams.random(rng, d_hidden, d)
    x = rng.normal((L, d_hidden))
    cache = UQKVCache.empty(d, kind)
    counts = []
    for t in range(L):
        with FlopCounter() as fc:
            _, cache = decode_step(x[t : t + 1], cache, params)
        counts.append(fc.multiply_adds)
    return counts


def fit_affine(t, y) -> tuple[float, float, float]:
    """Least-squares ``y = slope * t + intercept``; returns (slope, intercept, R^2)."""
    t, y = np.asarray(t, dtype=float), np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def run_bench(
    seq_lens: Iterable[int],
    dims: Iterable[int],
    block_sizes: Iterable[int],
    kind: MaskKind,
    precision: str = "f64",
    seed: int = 0,
    engines: Iterable[str] = ("parallel_naive", "blockwise"),
    decode_len: int = 0,
) -> list[dict]:
    from castle import kernels

    dtype = np.float64 if precision == "f64" else np.float32
    rows = []
    for d in dims:
        for L in seq_lens:
            proj = ProjectedSeq.random(Rng(seed), L, d).astype(dtype)
            std_flops, std_ms, _ = count_flops(standard_causal_forward, proj.q_c, proj.k_c, proj.v_c, warmup=True)
            base = {"L": L, "d": d, "precision": precision, "backend": kernels.get_backend(),
                    "std_flops": std_flops, "std_wall_ms": round(std_ms, 3)}
            if "parallel_naive" in engines:
                f, ms, _ = count_flops(parallel_forward, proj, kind, warmup=True)
                rows.append({**base, "engine": "parallel_naive", "B": L, "flops": f, "wall_ms": round(ms, 3)})
            if "recurrent" in engines:
                f, ms, _ = count_flops(recurrent_full, proj, kind)
                rows.append({**base, "engine": "recurrent", "B": 1, "flops": f, "wall_ms": round(ms, 3)})
            for b in block_sizes:
                if "blockwise" in engines:
                    f, ms, _ = count_flops(forward_blockwise, proj, kind, BlockConfig(min(b, L), L), warmup=True)
                    rows.append({**base, "engine": "blockwise", "B": b, "flops": f, "wall_ms": round(ms, 3)})
                if "blockwise_backward" in engines:
                    bc = BlockConfig(min(b, L), L)
                    _, saved = forward_blockwise(proj, kind, bc)
                    f, ms, _ = count_flops(backward_blockwise, proj, kind, bc, saved, proj.v_c)
                    rows.append({**base, "engine": "blockwise_backward", "B": b, "flops": f,
                                 "wall_ms": round(ms, 3)})
        if decode_len:
            for t, f in enumerate(decode_step_flops(decode_len, d, kind, seed), start=1):
                rows.append({"engine": "decode_step", "L": t, "d": d, "B": "", "precision": "f64",
                             "backend": kernels.get_backend(), "flops": f, "wall_ms": "",
                             "std_flops": "", "std_wall_ms": ""})
    return [{k: r[k] for k in BENCH_FIELDS} for r in rows]


def decode_demo(cfg: SuiteConfig, prompt_len: int) -> tuple[list[dict], Report]:
    """Prefill a prompt, decode the rest, and compare against the recurrent form."""
    kind = cfg.kind
    seed = cfg.seeds[0]
    _, _, projs = _instance(cfg, seed)
    p = projs[0]
    ref = recurrent_full(p, kind)
    steps = []
    errs = []
    t0 = time.perf_counter()
    if prompt_len > 0:
        out, cache = prefill(p.prefix(prompt_len), kind, BlockConfig(min(cfg.block_size, prompt_len), prompt_len))
        errs.append(abs_err(out, ref[:prompt_len]))
    else:
        cache = UQKVCache.empty(p.dim, kind)
    total_flops = 0
    for t in range(prompt_len, p.length):
        with FlopCounter() as fc:
            o, cache = decode_projected(p.map(lambda m, t=t: m[t : t + 1]), cache)
        total_flops += fc.multiply_adds
        e = abs_err(o, ref[t : t + 1])
        errs.append(e)
        steps.append({"t": t + 1, "flops": fc.multiply_adds, "cache_numbers": cache.n_numbers,
                      "max_abs_err": e})
    ms = (time.perf_counter() - t0) * 1e3
    a = max(errs, default=0.0)
    rep = Report("decode_demo", replace(cfg, heads=1), seed, a, a, total_flops, ms, a < cfg.tol.forward)
    return steps, rep
