"""Sweep the constrained peer's CPU capacity and report where each model's flags flip."""

import argparse
import dataclasses

from snow import config, experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--capacities", default="60,80,100,140,200")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    base = config.reference()
    print("capacity," + ",".join(base.models))
    for cap in (float(c) for c in args.capacities.split(",")):
        peers = [dataclasses.replace(p, cpu_capacity=cap) if p.peer == base.roster.constrained else p
                 for p in base.peers]
        cfg = dataclasses.replace(base, peers=peers)
        rows = []
        for model in cfg.models:
            run = experiment.simulate_run(cfg, model, args.seed)
            rows.append("/".join(run.flags.row()))
        print(f"{cap:g}," + ",".join(rows))


if __name__ == "__main__":
    main()
