#!/usr/bin/env python3
"""Run the full forced-identical cost comparison suite and print a table.

Each workflow runs over a shared seed range; the baseline engine free-runs
and the choreographed engine replays it with identical outputs, so the
reported ratios compare encoding work alone. JSON results go to --out.
"""

import argparse
import json
import sys
from pathlib import Path

from choreo.bench import SUITE_SHAPES, run_suite, tot_voter_sweep
from choreo.config import DEFAULT_CONFIG
from choreo.model import init_weights


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=30)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--skip-sweep", action="store_true")
    args = parser.parse_args()

    weights = init_weights(DEFAULT_CONFIG)
    seeds = list(range(args.seeds))
    results = {}
    print(f"{'workflow':12s} {'prefill ratio':>14s} {'95% CI':>16s} {'decode':>7s}")
    for workflow in ("madpar", "tot", "maditer"):
        res = run_suite(workflow, weights, seeds, shape=SUITE_SHAPES[workflow])
        results[workflow] = res.to_dict()
        print(f"{workflow:12s} {res.pooled_prefill_ratio:14.3f} "
              f"[{res.ci_low:6.3f},{res.ci_high:6.3f}] "
              f"{res.pooled_decode_ratio:7.3f}")

    if not args.skip_sweep:
        rows = tot_voter_sweep(weights, [1, 2, 4, 8], seeds[:8], n_branches=4)
        results["tot_voter_sweep"] = rows
        print("\ntot voter sweep (branches=4):")
        for row in rows:
            print(f"  voters={row['n_voters']}: ratio {row['ratio']:.3f}, "
                  f"savings {row['savings']:.3e} flops")

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"\nresults written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
