"""Run reference-3party over seeds 1-5, then check trends and render figures.

usage: python3 scripts/run_reference.py [out_dir] [--jobs N]
"""

import argparse
import sys

from snow import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", nargs="?", default="results/reference")
    ap.add_argument("--jobs", default="4")
    args = ap.parse_args()
    rc = cli.main(["run", "--config", "reference", "--out", args.out, "--jobs", args.jobs])
    if rc:
        return rc
    cli.main(["plot", "--out", args.out])
    return cli.main(["check", "--out", args.out])


if __name__ == "__main__":
    sys.exit(main())
