"""Command-line front end: ``castle {verify,gradcheck,bench,decode-demo}``.

Exit status is 0 when every report passes and 1 otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from contextlib import contextmanager

from castle.masks import MaskKind
from castle.verify import (
    BENCH_FIELDS,
    REPORT_FIELDS,
    SuiteConfig,
    Tolerances,
    decode_demo,
    run_bench,
    run_equivalence_suite,
    run_gradcheck,
)


def _add_common(p: argparse.ArgumentParser, seq_len_default: int = 16) -> None:
    p.add_argument("--seq-len", type=int, default=seq_len_default)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--block-size", type=int, default=4)
    p.add_argument("--mode", choices=("castle", "swl"), default="castle")
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--tol-forward", type=float, default=Tolerances.forward)
    p.add_argument("--tol-blockwise", type=float, default=Tolerances.blockwise)
    p.add_argument("--tol-grad", type=float, default=Tolerances.grad)
    p.add_argument("--tol-fd", type=float, default=Tolerances.fd_rel)
    p.add_argument("--fd-eps", type=float, default=Tolerances.fd_eps)
    _add_output(p)


def _add_output(p: argparse.ArgumentParser, default: str = "json") -> None:
    p.add_argument("--out", choices=("json", "csv"), default=default)
    p.add_argument("--out-file", default=None, help="write here instead of stdout")


def _suite_config(args) -> SuiteConfig:
    return SuiteConfig(
        seq_len=args.seq_len,
        dim=args.dim,
        heads=args.heads,
        block_size=args.block_size,
        mode=args.mode,
        window=args.window,
        seeds=tuple(range(args.seed, args.seed + args.num_seeds)),
        precision=args.precision,
        tol=Tolerances(
            forward=args.tol_forward,
            blockwise=args.tol_blockwise,
            grad=args.tol_grad,
            fd_rel=args.tol_fd,
            fd_eps=args.fd_eps,
        ),
    )


@contextmanager
def _sink(path):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _emit(rows: list[dict], fields, fmt: str, path) -> None:
    with _sink(path) as fh:
        if fmt == "json":
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        else:
            writer = csv.DictWriter(fh, fieldnames=list(fields))
            writer.writeheader()
            writer.writerows(rows)


def _emit_reports(reports, args) -> int:
    rows = [r.as_dict() for r in reports]
    _emit(rows, REPORT_FIELDS, args.out, args.out_file)
    failed = [r for r in rows if not r["pass"]]
    for r in failed:
        print(f"FAIL {r['test']} seed={r['seed']} B={r['B']} max_abs_err={r['max_abs_err']:.3e}",
              file=sys.stderr)
    return 1 if failed else 0


def cmd_verify(args) -> int:
    return _emit_reports(run_equivalence_suite(_suite_config(args)), args)


def cmd_gradcheck(args) -> int:
    return _emit_reports(run_gradcheck(_suite_config(args)), args)


def cmd_decode_demo(args) -> int:
    cfg = _suite_config(args)
    steps, report = decode_demo(cfg, args.prompt_len)
    for s in steps:
        print(f"t={s['t']:4d}  flops={s['flops']:8d}  cache={s['cache_numbers']:7d}  "
              f"err={s['max_abs_err']:.2e}", file=sys.stderr)
    return _emit_reports([report], args)


def cmd_bench(args) -> int:
    kind = MaskKind.castle() if args.mode == "castle" else MaskKind.swl(args.window)
    rows = run_bench(
        seq_lens=args.seq_len,
        dims=args.dim,
        block_sizes=args.block_size,
        kind=kind,
        precision=args.precision,
        seed=args.seed,
        engines=args.engines,
        decode_len=args.decode_len,
    )
    _emit(rows, BENCH_FIELDS, args.out, args.out_file)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="castle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="cross-engine equivalence suite")
    _add_common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="blockwise backward vs dense and finite differences")
    _add_common(p, seq_len_default=8)
    p.set_defaults(func=cmd_gradcheck, num_seeds=2)

    p = sub.add_parser("decode-demo", help="prefill a prompt and decode the rest")
    _add_common(p)
    p.add_argument("--prompt-len", type=int, default=5)
    p.set_defaults(func=cmd_decode_demo, num_seeds=1)

    p = sub.add_parser("bench", help="FLOP and wall-time sweep, CSV by default")
    p.add_argument("--seq-len", type=int, nargs="+", default=[64, 128, 256])
    p.add_argument("--dim", type=int, nargs="+", default=[16])
    p.add_argument("--block-size", type=int, nargs="+", default=[16])
    p.add_argument("--mode", choices=("castle", "swl"), default="castle")
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.add_argument("--engines", nargs="+", default=["parallel_naive", "blockwise"],
                   choices=("parallel_naive", "blockwise", "blockwise_backward", "recurrent"))
    p.add_argument("--decode-len", type=int, default=0, help="also record per-step decode FLOPs")
    _add_output(p, default="csv")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
