"""Wall time of the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_backends.py --seq-len 64 128 256 --dim 16 --block-size 16

Both backends run the same blockwise forward and backward; the script also
checks that their outputs agree and prints one CSV row per (L, backend).
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from castle import BlockConfig, MaskKind, ProjectedSeq, Rng, backward_blockwise, forward_blockwise, kernels


def _best_ms(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, (time.perf_counter() - t0) * 1e3)
    return best


def run(seq_lens, dim, block_size, repeats, kind):
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    previous = kernels.get_backend()
    rows = []
    try:
        for L in seq_lens:
            rng = Rng(L)
            proj = ProjectedSeq.random(rng, L, dim)
            d_out = rng.normal((L, dim))
            cfg = BlockConfig(block_size, L)
            outs = {}
            for name in backends:
                kernels.set_backend(name)
                out, saved = forward_blockwise(proj, kind, cfg)  # warm-up, compiles numba kernels
                backward_blockwise(proj, kind, cfg, saved, d_out)
                fwd = _best_ms(lambda: forward_blockwise(proj, kind, cfg), repeats)
                bwd = _best_ms(lambda: backward_blockwise(proj, kind, cfg, saved, d_out), repeats)
                outs[name] = out
                rows.append({"L": L, "d": dim, "B": block_size, "backend": name,
                             "forward_ms": round(fwd, 3), "backward_ms": round(bwd, 3)})
            if len(outs) == 2:
                diff = float(np.max(np.abs(outs["numba"] - outs["numpy"])))
                for r in rows[-2:]:
                    r["max_abs_diff"] = diff
    finally:
        kernels.set_backend(previous)
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seq-len", type=int, nargs="+", default=[64, 128, 256])
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--window", type=int, default=None, help="sliding window size; castle mask if omitted")
    args = p.parse_args(argv)
    kind = MaskKind.castle() if args.window is None else MaskKind.swl(args.window)
    rows = run(args.seq_len, args.dim, args.block_size, args.repeats, kind)
    fields = ["L", "d", "B", "backend", "forward_ms", "backward_ms", "max_abs_diff"]
    writer = csv.DictWriter(sys.stdout, fieldnames=fields, restval="")
    writer.writeheader()
    writer.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
