#!/usr/bin/env python3
"""Run the two-task forgetting benchmark at its shipping configuration.

Task A and task B are ciphers on disjoint alphabet halves; one shared
adapter is trained on A, frozen into a task record, then adapted to B under
each regularization mode with a grid-searched (lambda_reg, gamma). Writes
forgetting_table.csv, selection.json, and per-cell NDJSON histories.
"""

import argparse
import json
import sys

from loranmt.experiments import ForgettingConfig, forgetting_run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/forgetting")
    parser.add_argument("--config", help="JSON overriding the defaults")
    parser.add_argument("--modes", default="none,l2,gradient",
                        help="comma subset of none,l2,gradient")
    args = parser.parse_args()

    cfg = ForgettingConfig.from_json(args.config) if args.config \
        else ForgettingConfig()
    modes = tuple(m.strip() for m in args.modes.split(","))
    result = forgetting_run(cfg, args.out, modes=modes)
    print(json.dumps(result["summary"], indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
