"""Command line entry point: ``fairembed <scenario> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .config import Scenario, ScenarioConfig, parse_config, render_config
from .errors import ConfigError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "FAIREMBED_THREADS"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairembed", description="Run a synthetic demographic-disparity scenario.")
    p.add_argument("scenario", nargs="?", choices=[s.value for s in Scenario],
                   help="scenario to run (overrides run.scenario from the config)")
    p.add_argument("--config", help="TOML config file; unspecified keys keep their defaults")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--print-default-config", action="store_true", help="print the default config and exit")
    return p


def _threads(arg: int | None) -> int:
    if arg is not None:
        value, source = arg, "--threads"
    else:
        raw = os.environ.get(THREADS_ENV)
        if raw is None or raw == "":
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {raw!r}") from None
        source = THREADS_ENV
    if value < 1:
        raise ConfigError(f"{source}: thread count must be >= 1, got {value}")
    return value


def resolve_config(args) -> ScenarioConfig:
    cfg = parse_config(args.config) if args.config else ScenarioConfig()
    changes = {}
    if args.scenario:
        changes["scenario"] = args.scenario
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed: must be an unsigned 64-bit integer")
        changes["seed"] = args.seed
    if args.out:
        changes["out"] = args.out
    return dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, **changes)) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.print_default_config:
        sys.stdout.write(render_config())
        return EXIT_OK
    try:
        cfg = resolve_config(args)
        threads = _threads(args.threads)
        from .scenarios import run_scenario

        manifest = run_scenario(cfg, threads=threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{manifest.scenario}: {len(manifest.files)} files in {cfg.run.out} "
          f"({manifest.wall_clock_seconds:.1f} s)")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
