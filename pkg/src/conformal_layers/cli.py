"""Command-line entry point.

Exit codes: 0 ok, 1 tolerance or assertion failure, 2 usage or build error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .bench import BenchmarkError, bench_batch, bench_depth, max_relative_error, write_csv
from .fusion import ConformalSequence, DegenerateOutputError
from .homogeneous import SparseOperator
from .lowering import LoweringError
from .netspec import NetworkSpecError, load_network
from .reference import sequential_forward

VERIFY_TOL = 1e-9
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("conformal_layers")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("expected at least one positive integer")
    return values


def _default_seed() -> int:
    return int(os.environ.get("CF_SEED", "0"))


def _read_rows(path: str) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    if rows.size == 0:
        raise ValueError(f"{path}: no samples")
    return rows


def _write_rows(path: str, rows: np.ndarray) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_verify(args) -> int:
    try:
        net = load_network(args.network)
        seq = ConformalSequence(net, debug=args.debug)
        cache = seq.build_cache()
    except (OSError, NetworkSpecError, LoweringError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.corrupt_cache:
        bump = SparseOperator.from_triples([0], [0], [1.0], cache.Q.shape)
        cache.Q = cache.Q + bump

    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.trials, net.d_in))
    try:
        fused = seq.forward(x)
    except DegenerateOutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    ref = sequential_forward(net, x, alphas=seq.alphas)
    err = max_relative_error(fused, ref)
    ok = err <= VERIFY_TOL
    print(f"trials={args.trials} max_relative_error={err:.3e} tolerance={VERIFY_TOL:.0e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_infer(args) -> int:
    try:
        net = load_network(args.network)
        if args.encoding:
            net = type(net)(net.input, net.layers, order=net.order, encoding=args.encoding)
        x = _read_rows(args.input)
        if x.shape[1] != net.d_in:
            raise ValueError(f"{args.input}: rows have {x.shape[1]} values, network expects {net.d_in}")
        if args.mode == "fused":
            y = ConformalSequence(net).forward(x)
        else:
            y = sequential_forward(net, x)
        _write_rows(args.output, y)
    except (OSError, NetworkSpecError, LoweringError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _emit(records, out_path: str) -> None:
    with open(out_path, "w", encoding="ascii", newline="") as fh:
        write_csv(records, fh)
    write_csv(records, sys.stdout)


def _ratio(records, mode, k_lo, k_hi, key="k"):
    t = {getattr(r, key): r.median_ns for r in records if r.mode == mode}
    return t[k_hi] / t[k_lo]


def cmd_bench_depth(args) -> int:
    try:
        records = bench_depth(args.k, args.reps, batch=args.batch, size=args.size,
                              channels=args.channels, seed=args.seed, float32=args.float32)
    except BenchmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, LoweringError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit(records, args.out)
    if args.check and len(args.k) > 1:
        lo, hi = min(args.k), max(args.k)
        fused, seq = _ratio(records, "fused", lo, hi), _ratio(records, "sequential", lo, hi)
        nnz = {(r.nnz_LM, r.nnz_Q) for r in records if r.mode == "fused"}
        ok = fused <= 1.5 and seq >= 3.0 and len(nnz) == 1
        print(f"fused k={hi}/k={lo}: {fused:.2f}  sequential: {seq:.2f}  distinct cache nnz: {len(nnz)}  "
              f"{'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_FAIL
    return EXIT_OK


def cmd_bench_batch(args) -> int:
    try:
        records = bench_batch(args.sizes, args.reps, stages=args.stages, size=args.size,
                              channels=args.channels, seed=args.seed, float32=args.float32)
    except BenchmarkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, LoweringError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _emit(records, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conformal-layers", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="compare fused and layer-by-layer inference on random inputs")
    p.add_argument("network")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--debug", action="store_true", help="cross-check the cache against the dense expansion")
    p.add_argument("--corrupt-cache", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("infer", help="run a network on CSV samples (one per line)")
    p.add_argument("network")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mode", choices=("fused", "sequential"), default="fused")
    p.add_argument("--encoding", choices=("norm", "canonical"), default=None,
                   help="override the network's input encoding")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_infer)

    for name, func, list_flag, default, text in (
        ("bench-depth", cmd_bench_depth, "--k", "2,4,8,16", "time both paths on the DkNet family for each depth"),
        ("bench-batch", cmd_bench_batch, "--sizes", "1,8,64,256", "time both paths on the 3-stage net for each batch size"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument(list_flag, type=_int_list, default=_int_list(default), help="comma-separated list")
        p.add_argument("--reps", type=int, default=11)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--channels", type=int, default=8)
        p.add_argument("--float32", action="store_true")
        p.set_defaults(func=func)
        if name == "bench-depth":
            p.add_argument("--batch", type=int, default=64)
            p.add_argument("--size", type=int, default=3)
            p.add_argument("--check", action="store_true", help="assert the depth-independence shape")
        else:
            p.add_argument("--stages", type=int, default=3)
            p.add_argument("--size", type=int, default=16)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is None:
        args.seed = _default_seed()
    if getattr(args, "reps", 5) < 5:
        print("error: --reps must be >= 5", file=sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
