"""Command-line runner.

    additive-lab run config.json
    additive-lab run --preset figure1 --seed 7 --out-dir runs/f1
    additive-lab validate config.json

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

from .config import PRESETS, ConfigError, dump_config, load_config, resolve_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4

# trainer flags -> dotted config paths
_FLAG_PATHS = {
    "d": "target.d", "M": "target.M", "p": "target.p", "J": "network.J", "q": "network.q",
    "activation": "network.activation", "eta0": "train.eta0", "T1": "train.T1", "T2": "train.T2",
    "r": "train.r", "lambda_": "train.lambda_bar", "snapshot_every": "train.snapshot_every",
}


def _apply_threads() -> None:
    raw = os.environ.get("ADDITIVE_LAB_THREADS")
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ADDITIVE_LAB_THREADS: expected an integer, got {raw!r}") from None
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="additive-lab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a preset or config file")
    val = sub.add_parser("validate", help="resolve and check a config file")
    for p in (run, val):
        p.add_argument("config", nargs="?", help="JSON config file")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        g = p.add_argument_group("training overrides")
        g.add_argument("--d", type=int)
        g.add_argument("--M", type=int)
        g.add_argument("--J", type=int)
        g.add_argument("--p", type=int)
        g.add_argument("--q", type=int)
        g.add_argument("--activation", choices=("relu", "randomized_poly"))
        g.add_argument("--eta0", type=float)
        g.add_argument("--T1", type=int)
        g.add_argument("--T2", type=int)
        g.add_argument("--r", type=int, choices=(1, 2))
        g.add_argument("--lambda", dest="lambda_", type=float)
        g.add_argument("--snapshot-every", dest="snapshot_every", type=int)
    return ap


def _resolve(args) -> dict:
    raw = load_config(args.config) if args.config else {}
    if not args.config and not args.preset:
        raise ConfigError("give a config file or --preset")
    overrides = {}
    for flag, path in _FLAG_PATHS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[path] = value
    if args.lambda_ is not None:
        overrides["train.tune_lambda"] = False
    return resolve_config(raw, args.preset, args.seed, args.out_dir, overrides)


def _error_record(out_dir, code: int, exc: BaseException) -> None:
    record = {"exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(json.dumps(record, indent=2) + "\n")
        except OSError:
            pass


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg = None
    try:
        cfg = _resolve(args)
        if args.command == "validate" or args.dry_run:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        _apply_threads()
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved.json").write_text(dump_config(cfg))
    except ConfigError as exc:
        _error_record(None, EXIT_CONFIG, exc)
        return EXIT_CONFIG

    from .experiments import run_experiment
    from .hermite import QuadratureError
    from .trainer import ConvergenceError, NonFiniteUpdateError

    try:
        summary = run_experiment(cfg)
    except ConfigError as exc:
        _error_record(cfg["out_dir"], EXIT_CONFIG, exc)
        return EXIT_CONFIG
    except (NonFiniteUpdateError, ConvergenceError, QuadratureError, FloatingPointError,
            ArithmeticError) as exc:
        _error_record(cfg["out_dir"], EXIT_NUMERIC, exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        _error_record(cfg["out_dir"], EXIT_CONFIG, exc)
        return EXIT_CONFIG
    except Exception as exc:  # surface anything else as a numeric failure with a record
        traceback.print_exc()
        _error_record(cfg["out_dir"], EXIT_NUMERIC, exc)
        return EXIT_NUMERIC
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if summary["passed"] else EXIT_ACCEPTANCE


if __name__ == "__main__":
    sys.exit(main())
