"""snow-sim command line: run, plot, check, serve-signaling.

Exit codes: 0 ok, 1 invariant or trend failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys

from . import config as cfgmod
from . import experiment
from .signaling import serve
from .topologies import CallError

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="snow-sim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate every model x seed and write CSV artifacts")
    r.add_argument("--config", required=True, help="scenario JSON, or 'reference' for reference-3party")
    r.add_argument("--out", required=True)
    r.add_argument("--seeds", type=_seeds, help="comma separated, overrides the config")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--media-trace", action="store_true", help="also write per-packet media traces")

    pl = sub.add_parser("plot", help="render one SVG per metric from a results directory")
    pl.add_argument("--out", required=True)

    c = sub.add_parser("check", help="evaluate trend assertions and the qualitative matrix")
    c.add_argument("--out", required=True)

    s = sub.add_parser("serve-signaling", help="run the NDJSON signaling relay")
    s.add_argument("--listen", default="127.0.0.1:8765")
    s.add_argument("--max-rooms", type=int, default=None)
    s.add_argument("--log", default=None, help="append relayed message summaries to this file")
    return p


def _load(path):
    if path == "reference":
        return cfgmod.reference()
    return cfgmod.load(path)


def cmd_run(args):
    try:
        config = _load(args.config)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        experiment.run_experiment(config, args.out, args.seeds, args.jobs, args.media_trace)
    except (experiment.ExperimentError, CallError) as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"wrote results for {len(config.models)} models to {args.out}")
    return EXIT_OK


def cmd_plot(args):
    try:
        for path in experiment.render_plots(args.out):
            print(path)
    except experiment.ExperimentError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_check(args):
    try:
        checks = experiment.check_dir(args.out)
    except experiment.ExperimentError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    for c in checks:
        print(c.line())
    return EXIT_INVARIANT if any(c.status == "fail" for c in checks) else EXIT_OK


def cmd_serve(args):
    try:
        asyncio.run(serve(args.listen, args.max_rooms, args.log))
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "plot": cmd_plot, "check": cmd_check, "serve-signaling": cmd_serve}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
