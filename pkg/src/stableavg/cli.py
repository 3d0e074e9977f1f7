"""Command line: ``stableavg <kind> [--config FILE] [--seed N] [--out DIR] [--jobs N]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RUN_KINDS, load_config
from .errors import ConfigError
from .runner import run, write_json

log = logging.getLogger("stableavg")


def build_parser():
    p = argparse.ArgumentParser(prog="stableavg",
                                description="Slow-fast stable-noise averaging experiments.")
    sub = p.add_subparsers(dest="kind", required=True, metavar="KIND")
    for kind in RUN_KINDS:
        s = sub.add_parser(kind, help=f"run the {kind} experiment")
        s.add_argument("--config", type=Path, help="INI config (default: heat1d preset)")
        s.add_argument("--seed", type=int, help="override experiment.master_seed")
        s.add_argument("--out", type=Path, default=None,
                       help="output directory (default: runs/<kind>)")
        s.add_argument("--jobs", type=int, default=None, help="worker processes")
        s.add_argument("--strict-assumptions", action="store_true",
                       help="reject r outside its admissible interval")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or Path("runs") / args.kind
    strict = True if args.strict_assumptions else None
    try:
        if args.config is not None:
            cfg = load_config(args.config, strict=strict)
        else:
            cfg = load_config(text="[experiment]\npreset = heat1d\n", strict=strict)
        overrides = {}
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError(["--jobs: must be >= 1"])
            overrides["jobs"] = args.jobs
        if overrides:
            cfg = cfg.with_overrides(**overrides)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "manifest.json", {"kind": args.kind, "status": "failed",
                                           "exit_code": exc.exit_code,
                                           "failures": [{"kind": "ConfigError",
                                                         "violations": exc.violations}],
                                           "files": ["manifest.json"]})
        return exc.exit_code
    code = run(cfg, args.kind, out)
    print(f"{args.kind}: exit {code}, artifacts in {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
