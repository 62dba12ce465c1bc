"""Command-line entry point: ``heatpath <kind> --config FILE [--seed U64] [--workers N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

from .config import KINDS, U64, ConfigError, load_config
from .experiments import EXIT_CONFIG, EXIT_RUNTIME, run_experiment

SEED_ENV = "HEATPATH_SEED"


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= U64:
        raise argparse.ArgumentTypeError(f"{value} is not an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heatpath", description="Stochastic heat equation experiments.")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--config", required=True, help="TOML experiment file")
    p.add_argument("--seed", type=_u64, default=None, help=f"master seed (overrides config and ${SEED_ENV})")
    p.add_argument("--workers", type=_positive, default=1)
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    return p


def resolve_seed(flag: Optional[int], environ=os.environ) -> Optional[int]:
    """Seed precedence: the flag, then the environment variable, then the config."""
    if flag is not None:
        return flag
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return _u64(raw)
    except argparse.ArgumentTypeError as exc:
        raise ConfigError([f"{SEED_ENV}: {exc}"]) from None


def _fail(code: int, reason: str) -> int:
    print(json.dumps({"status": code, "reason": reason}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if cfg.kind != args.kind:
            raise ConfigError([f"kind: config declares {cfg.kind!r} but {args.kind!r} was requested"])
        cfg = cfg.with_overrides(resolve_seed(args.seed), args.out)
    except ConfigError as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return _fail(EXIT_CONFIG, "config-error")
    except OSError as exc:
        return _fail(EXIT_RUNTIME, f"io-error: {exc}")
    result = run_experiment(cfg, workers=args.workers)
    for a in result.assertions:
        print(f"{'PASS' if a.passed else 'FAIL'} {a.name} value={a.value} threshold={a.threshold}")
    print(f"status={result.status} manifest={result.manifest_path}" + (f" reason={result.reason}" if result.reason else ""))
    return result.status


if __name__ == "__main__":
    sys.exit(main())
