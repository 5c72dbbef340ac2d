"""``koopman-lora oracle|train|eval --config <path> [--out <dir>] [--jobs n] [--seed k]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical divergence.
``KLORA_THREADS`` caps BLAS threads (default 1, which keeps runs bit-reproducible).
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from threadpoolctl import threadpool_limits

from . import runner
from .config import expand_sweep, load_config
from .errors import DivergenceError, InvalidInputError, NumericalFailure

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3

COMMANDS = {
    "oracle": lambda cfg, out: runner.run_oracle(cfg, out),
    "train": lambda cfg, out: runner.run_train(cfg, out),
    "eval": lambda cfg, out: runner.run_eval(cfg, out),
}


def _threads():
    raw = os.environ.get("KLORA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"KLORA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InvalidInputError("KLORA_THREADS must be at least 1")
    return n


def _run_one(command, cfg, out):
    """Run one command in-process and map failures to exit codes."""
    try:
        with threadpool_limits(limits=_threads()):
            COMMANDS[command](cfg, out)
    except DivergenceError as exc:
        print(f"koopman-lora {command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NumericalFailure as exc:
        print(f"koopman-lora {command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except InvalidInputError as exc:
        print(f"koopman-lora {command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def _job(args):
    command, values, source, out = args
    from .config import RunConfig

    return _run_one(command, RunConfig(values, source), out)


def build_parser():
    parser = argparse.ArgumentParser(prog="koopman-lora", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument("--jobs", type=int, default=1, help="parallel runs for sweeps")
    parser.add_argument("--seed", type=int, help="override run.seed")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.jobs < 1:
        print("koopman-lora: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg, sweeps = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(**{"run.seed": args.seed})
            sweeps.pop("run.seed", None)
        runs = expand_sweep(cfg, sweeps)
        for run in runs:
            run.seed  # validates presence and type
    except InvalidInputError as exc:
        print(f"koopman-lora: {exc}", file=sys.stderr)
        return EXIT_USAGE

    if len(runs) == 1 and not sweeps:
        return _run_one(args.command, runs[0], args.out)
    jobs = [(args.command, r.values, r.source, os.path.join(args.out, f"run{i:03d}_{r.hash()}"))
            for i, r in enumerate(runs)]
    if args.jobs == 1:
        codes = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(_job, jobs))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
