"""``lamlab`` command-line interface.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .geometry import GeometryError
from .lab import (
    ValidationError,
    load_scenario,
    run_convergence,
    run_geometry,
    run_scenario,
)
from .mesh import MeshError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

PHASES = {
    "mesh": ("mesh",),
    "solve": ("mesh", "solve"),
    "diagnose": ("mesh", "solve", "diagnose"),
    "sweep": ("sweep",),
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario TOML file")
    common.add_argument("--out", required=True, help="run directory")
    common.add_argument("--seed", type=lambda s: int(s, 0), default=None, help="override the scenario seed")
    common.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    common.add_argument("--quiet", action="store_true", help="only report errors")

    p = argparse.ArgumentParser(prog="lamlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("verify-geometry", parents=[common], help="frame-field self test")
    sub.add_parser("mesh", parents=[common], help="build and save the mesh")
    sub.add_parser("solve", parents=[common], help="mesh and solve")
    sub.add_parser("diagnose", parents=[common], help="mesh, solve and regularity diagnostics")
    sub.add_parser("sweep", parents=[common], help="gap sweep over the neck family")
    conv = sub.add_parser("convergence", parents=[common], help="uniform refinement study")
    conv.add_argument("--refine", type=int, default=4, help="number of mesh levels")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    say = (lambda *a: None) if args.quiet else (lambda *a: print(*a))
    try:
        cfg = load_scenario(args.scenario)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "verify-geometry":
            man = run_geometry(cfg, args.out, args.force)
        elif args.command == "convergence":
            man = run_convergence(cfg, args.out, args.refine, args.force)
        else:
            man = run_scenario(cfg, args.out, args.force, PHASES[args.command])
    except (ValidationError, GeometryError, MeshError, FileExistsError) as exc:
        print(f"lamlab: validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, RuntimeError, ValueError, KeyError) as exc:
        print(f"lamlab: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    say(json.dumps({"out_dir": man.out_dir, "files": man.files, "scenario_hash": man.scenario_hash,
                    "timings": {k: round(v, 3) for k, v in man.timings.items()}}, indent=2))
    if man.errors:
        print(f"lamlab: {len(man.errors)} error(s) recorded in report.json", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
