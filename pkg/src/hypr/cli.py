"""Command-line interface: train, verify, bench, gen.

Exit codes: 0 success, 1 verification failure, 2 usage/configuration
error, 3 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .bench import constant_memory_check, run_bench
from .config import load_config
from .data import CueTaskSpec, generate_cue_dataset, save_dataset
from .errors import ConfigError, NumericError
from .verify import default_suites

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _int_list(text: str):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypr",
        description="Subsequence-parallel training engine for recurrent spiking networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--precision", choices=("f32", "f64"), default=None)
    p_train.add_argument("--workers", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--quiet", action="store_true")

    p_verify = sub.add_parser("verify", help="run oracle-equivalence suites")
    p_verify.add_argument("--model", default=None, help="comma-separated model kinds")
    p_verify.add_argument("--lambda", dest="lam_list", type=_int_list, default=None)
    p_verify.add_argument("--tol", type=float, default=None)

    p_bench = sub.add_parser("bench", help="time/memory benchmark matrix")
    p_bench.add_argument("--T", dest="t_list", type=_int_list, required=True)
    p_bench.add_argument("--lambda", dest="lam_list", type=_int_list, required=True)
    p_bench.add_argument("--workers", dest="workers_list", type=_int_list, required=True)
    p_bench.add_argument("--model", default="brf")
    p_bench.add_argument("--m", type=int, default=128)
    p_bench.add_argument("--d", type=int, default=15)
    p_bench.add_argument("--batch", type=int, default=16)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--out", default=None)
    p_bench.add_argument("--no-reference", action="store_true")

    p_gen = sub.add_parser("gen", help="generate datasets")
    gen_sub = p_gen.add_subparsers(dest="dataset", required=True)
    p_cue = gen_sub.add_parser("cue", help="cue/delay/recall task")
    p_cue.add_argument("--delay", type=int, required=True)
    p_cue.add_argument("--samples", type=int, default=256)
    p_cue.add_argument("--t-pat", type=int, default=20)
    p_cue.add_argument("--p-active", type=float, default=0.5)
    p_cue.add_argument("--seed", type=int, default=0)
    p_cue.add_argument("--out", required=True)
    return parser


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.precision is not None:
        updates["precision"] = args.precision
    if args.workers is not None:
        updates["workers"] = args.workers
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    from .training import fit

    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    result = fit(cfg, out_dir=args.out, log=log)
    print(
        f"done: best valid acc {result.best_valid_acc:.4f} at epoch "
        f"{result.best_epoch}; metrics in {result.out_dir}/metrics.jsonl"
    )
    return EXIT_OK


def _cmd_verify(args) -> int:
    fault = os.environ.get("HYPR_VERIFY_FAULT") or None
    models = args.model.split(",") if args.model else None
    results = default_suites(fault=fault, models=models, lam_list=args.lam_list,
                             tol=args.tol)
    worst_fail = 0.0
    for res in results:
        print(res.line())
    failed = [r for r in results if not r.passed]
    if failed:
        worst_fail = max(r.worst for r in failed)
        print(f"verification FAILED; worst relative error {worst_fail:.3e}")
        return EXIT_VERIFY
    print("all suites passed")
    return EXIT_OK


def _cmd_bench(args) -> int:
    rows = run_bench(
        args.t_list, args.lam_list, args.workers_list,
        model=args.model, m=args.m, d=args.d, batch=args.batch, seed=args.seed,
        with_reference=not args.no_reference,
        log=lambda msg: print(msg, flush=True),
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    if not constant_memory_check(rows):
        print("warning: peak bytes varied across T at fixed lam", file=sys.stderr)
    return EXIT_OK


def _cmd_gen(args) -> int:
    if args.dataset == "cue":
        if args.delay < 0:
            raise ConfigError(f"delay must be >= 0, got {args.delay}")
        spec = CueTaskSpec(
            n_samples=args.samples, t_pat=args.t_pat, t_delay=args.delay,
            p_active=args.p_active, seed=args.seed,
        )
        ds = generate_cue_dataset(spec)
        out_dir = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(out_dir, exist_ok=True)
        save_dataset(args.out, ds)
        print(f"wrote {len(ds)} samples of length {ds.seq_len} to {args.out}")
        return EXIT_OK
    raise ConfigError(f"unknown dataset {args.dataset!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "gen":
            return _cmd_gen(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
