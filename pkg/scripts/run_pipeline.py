"""Run every CLI command in order for one configuration and print the report summary."""

import argparse
import json
import sys

from sparsefpca.cli import COMMANDS, main as cli_main
from sparsefpca.config import load_config

ORDER = ("simulate", "clean", "describe", "fpca-fit", "fpca-forecast", "lmm", "residual-update", "report")
assert set(ORDER) == set(COMMANDS)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config", help="TOML run configuration")
    p.add_argument("--skip-simulate", action="store_true", help="use paths.input instead of simulating")
    p.add_argument("--threads", type=int)
    args = p.parse_args()
    extra = ["--threads", str(args.threads)] if args.threads else []
    for command in ORDER:
        if command == "simulate" and args.skip_simulate:
            continue
        code = cli_main([command, "--config", args.config, *extra])
        if code:
            sys.exit(code)
    report = json.loads((load_config(args.config).run_dir() / "report.json").read_text())
    for outcome, entry in report["forecast"].items():
        print(f"{outcome}: MSE null {entry['MSE_null']:.1f}, model {entry['MSE_model']:.1f}, R2 {entry['R2']:.3f}")


if __name__ == "__main__":
    main()
