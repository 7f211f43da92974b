"""
GPE Ground-State Solver
Command-line entry point

Runs multilevel-correction and direct finite element studies of the
Gross-Pitaevskii ground state and writes table.csv / report.json.

    gpe-mlc run --config sample_data/harmonic_coarse.cfg --levels 3
"""

import argparse
import logging
import os
import sys

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import LOG_LEVEL, TABLE_FILENAME, REPORT_FILENAME
from modules.harness import EXIT_CONFIG, EXIT_NOT_CONVERGED, run
from modules.run_config import load_run_config
from utils.errors import ConfigError, GpeMlcError
from utils.helpers import export_to_text

# CLI flag -> RunConfig field
OVERRIDE_FLAGS = {
    "domain": "domain",
    "zeta": "zeta",
    "levels": "levels",
    "base_n": "base_n",
    "mode": "mode",
    "theta": "dorfler_theta",
    "out_dir": "out_dir",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpe-mlc",
        description="Multilevel-correction finite element solver for the GPE ground state",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="Run a uniform or adaptive convergence study")
    run_parser.add_argument("--config", help="key=value run configuration file")
    run_parser.add_argument("--domain", help="unit-square or l-shape")
    run_parser.add_argument("--zeta", help="interaction strength (>= 0)")
    run_parser.add_argument("--levels", help="number of uniform levels")
    run_parser.add_argument("--base-n", dest="base_n", help="cells per unit side of the initial mesh")
    run_parser.add_argument("--mode", help="mlc, direct, both or adaptive")
    run_parser.add_argument("--theta", help="Dorfler bulk parameter in (0, 1)")
    run_parser.add_argument("--out-dir", dest="out_dir", help="directory for table.csv, report.json and meshes")
    run_parser.add_argument("--quiet", action="store_true", help="suppress the console summary")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    overrides = {field: getattr(args, flag) for flag, field in OVERRIDE_FLAGS.items()}
    try:
        cfg = load_run_config(args.config, overrides)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = run(cfg)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except GpeMlcError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_NOT_CONVERGED

    if not args.quiet:
        print(export_to_text(result.report))
        print(f"wrote {os.path.join(cfg.out_dir, TABLE_FILENAME)} and {os.path.join(cfg.out_dir, REPORT_FILENAME)}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
