"""Command-line entry point: ``defectcv <command> [flags]``.

Every flag can also be given in a flat ``key = value`` file passed with
``--config``; command-line values win.
"""
from __future__ import annotations

import argparse
import logging
import sys

from defectcv.cell_solver import SolverError
from defectcv.experiments import COMMANDS, ConfigError, _PARSERS, load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defectcv", description="Control-variate Monte Carlo for the apparent "
                                     "homogenized tensor of random two-phase lattices.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat 'key = value' file")
    parser.add_argument("--alpha", help="reference phase value")
    parser.add_argument("--beta", help="defect phase value")
    parser.add_argument("--eta", nargs="+", help="defect probability; list or start:step:stop")
    parser.add_argument("--n", nargs="+", help="domain size(s) in cells per side")
    parser.add_argument("--m", help="number of realizations")
    parser.add_argument("--res", help="elements per cell side")
    parser.add_argument("--seed", help="master seed")
    parser.add_argument("--estimators", nargs="+", help="subset of MC CV1 CV2 CV3 CV3ID WEAK")
    parser.add_argument("--rb-snapshots", nargs="+", help="snapshot sets: 4 8 12 20 all or offsets like 0,1;1,0")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--d", help="dimension (1 or 2)")
    parser.add_argument("--entry", help="reported entry, e.g. 1,1")
    parser.add_argument("--full-matrix", action="store_const", const="1", help="report every entry")
    parser.add_argument("--n-ref", help="reference domain size")
    parser.add_argument("--m-ref", help="reference realizations")
    parser.add_argument("--ref-seed", help="reference seed")
    parser.add_argument("--ref-estimator", help="estimator for the reference value")
    parser.add_argument("--ref-snapshots", help="snapshot set for reduced-basis catalogs")
    parser.add_argument("--catalog", choices=("exact", "rb", "auto"), help="pair catalog method")
    parser.add_argument("--rho", choices=("optimal", "split"), help="control coefficient policy")
    parser.add_argument("--workers", help="worker processes")
    parser.add_argument("--tol", help="relative residual tolerance of the linear solver")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for key in _PARSERS:
        value = getattr(args, key, None)
        if value is None:
            continue
        text = " ".join(value) if isinstance(value, list) else value
        try:
            out[key] = _PARSERS[key](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for --{key.replace('_', '-')}: {exc}") from exc
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, **_overrides(args))
        result = COMMANDS[args.command](cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    for k, v in result.summary.items():
        print(f"{k} = {v}")
    for path in result.files:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
