"""Repeat the reference experiment on two disjoint seed batches and compare verdicts.

The two batches stand in for two measurement days: magnitudes may move, the
trend verdicts should not.
"""

import argparse
import os
import sys

from snow import config, experiment

BATCHES = ([1, 2, 3, 4, 5], [6, 7, 8, 9, 10])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="results/batches")
    ap.add_argument("--jobs", type=int, default=4)
    args = ap.parse_args()
    cfg = config.reference()
    verdicts = []
    for i, seeds in enumerate(BATCHES, start=1):
        out = os.path.join(args.out, f"batch{i}")
        experiment.run_experiment(cfg, out, seeds, jobs=args.jobs)
        checks = experiment.check_dir(out)
        print(f"batch {i} seeds {seeds}")
        for c in checks:
            print("  " + c.line())
        verdicts.append([(c.name, c.status) for c in checks])
    stable = verdicts[0] == verdicts[1]
    print("verdicts stable across batches" if stable else "verdicts differ between batches")
    return 0 if stable else 1


if __name__ == "__main__":
    sys.exit(main())
