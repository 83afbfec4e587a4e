"""Run model x seed simulations, summarize them and write result artifacts."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .core import VIDEO
from .media import MediaPlane
from .metrics import METRICS, MetricsError, improvement, qualitative_flags, window_summarize
from .topologies import CallPlan, TopologyModel, new_setup, start_call

log = logging.getLogger(__name__)

TABLE2 = {
    "MESH": ("YES", "YES", "NO"),
    "SFU": ("NO", "NO", "YES"),
    "MCU": ("NO", "NO", "YES"),
    "MCUTWO": ("NO", "YES", "NO"),
    "MCUMULTI": ("NO", "NO", "NO"),
}


class ExperimentError(Exception):
    pass


@dataclass
class RunResult:
    model: str
    seed: int
    peer_stats: dict  # peer -> metric -> (mean, stddev)
    constrained_latency_ms: float
    utilization: dict  # peer -> per-second utilization
    connect_ms: float
    ice_ms: float
    trace: list
    flows: dict = field(default_factory=dict)
    flags: object = None


def _aggregate_tracks(summaries):
    """One receiver's tracks: packetsLost summed, the rest averaged."""
    out = {}
    for metric in METRICS:
        vals = [s[metric] for s in summaries if not math.isnan(s[metric][0])]
        if not vals:
            out[metric] = (float("nan"), float("nan"))
        elif metric == "packetsLost":
            out[metric] = (sum(m for m, _ in vals), math.sqrt(sum(sd * sd for _, sd in vals)))
        else:
            out[metric] = (sum(m for m, _ in vals) / len(vals), sum(sd for _, sd in vals) / len(vals))
    return out


def simulate_run(config, model, seed, media_trace_path=None):
    model = TopologyModel(model)
    roster = config.roster
    setup = new_setup(config.profiles(), seed, config.relay)
    plan = CallPlan("call-1", model, roster.initiator, tuple(roster.others))
    media = config.media
    call = start_call(plan, setup, media.audio_excludes_self, media.merge_fps)
    plane = MediaPlane(setup.sim, setup.network, setup.graph, media)
    plane.attach(call)
    plane.start(plan.parties)
    dur = config.durations
    setup.sim.run(dur.total_s * 1000.0 + 1.0)
    if call.failed:
        raise ExperimentError(f"{model.value} seed {seed}: call failed: {call.failed}")
    if call.established_at is None:
        raise ExperimentError(f"{model.value} seed {seed}: call never finished connecting")

    per_peer = {}
    for (receiver, _), st in sorted(plane.inbound.items()):
        if st.kind != VIDEO:
            continue
        try:
            per_peer.setdefault(receiver, []).append(window_summarize(st.snapshots, dur.warmup_s, dur.measure_s))
        except MetricsError:
            continue
    peer_stats = {p: _aggregate_tracks(s) for p, s in per_peer.items()}

    lo, hi = dur.warmup_s * 1000.0, dur.total_s * 1000.0
    lat = [
        v
        for (receiver, _), st in plane.inbound.items()
        if receiver == (roster.constrained or roster.others[-1]) and st.kind == VIDEO
        for t, v in st.latency_samples
        if lo <= t <= hi
    ]
    n_windows = int(dur.total_s)
    util = {p: plane.utilization(p, n_windows) for p in plan.parties}
    ice = call.ice_durations()
    run = RunResult(
        model.value,
        seed,
        peer_stats,
        sum(lat) / len(lat) if lat else 0.0,
        util,
        call.established_at - call.first_offer_at,
        sum(ice) / len(ice),
        [r.line() for r in call.trace],
        {f"{k[0]}|{k[1]}": dict(v) for k, v in sorted(plane.flows.items())},
    )
    run.flags = qualitative_flags(run, config.thresholds)
    if media_trace_path:
        plane.dump_trace(media_trace_path)
    return run


def _run_one(args):
    config, model, seed, trace_path = args
    return simulate_run(config, model, seed, trace_path)


def model_means(runs):
    """Average per-peer window means across peers and seeds: model -> metric -> value."""
    acc = {}
    for r in runs:
        for stats in r.peer_stats.values():
            for metric, (mean, _) in stats.items():
                if not math.isnan(mean):
                    acc.setdefault(r.model, {}).setdefault(metric, []).append(mean)
    return {m: {k: sum(v) / len(v) for k, v in d.items()} for m, d in acc.items()}


def improvements(means):
    mesh = means.get("MESH")
    out = {}
    if mesh is None:
        return out
    for model, d in means.items():
        if model == "MESH":
            continue
        for metric in METRICS:
            if metric in d and metric in mesh:
                try:
                    out[(model, metric)] = improvement(mesh[metric], d[metric])
                except MetricsError:
                    out[(model, metric)] = float("nan")
    return out


def aggregate_flags(runs):
    """Per model, a flag is YES when it fires in a majority of seeds."""
    by_model = {}
    for r in runs:
        by_model.setdefault(r.model, []).append(r.flags)
    out = {}
    for model, flags in by_model.items():
        half = len(flags) / 2.0
        out[model] = tuple(
            "YES" if sum(getattr(f, name) for f in flags) > half else "NO"
            for name in ("delays", "high_cpu", "slow_connect")
        )
    return out


def _fmt(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.9g}"


def _header(w, config, seeds):
    w.writerow([f"# config={config.name} hash={config.digest()} seeds={' '.join(map(str, seeds))}"])


def run_experiment(config, out_dir, seeds=None, jobs=1, media_trace=False):
    seeds = list(seeds or config.seeds)
    os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)
    tasks = []
    for model in config.models:
        for seed in seeds:
            tp = os.path.join(out_dir, "traces", f"{model}-seed{seed}-media.csv") if media_trace else None
            tasks.append((config, model, seed, tp))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            runs = list(ex.map(_run_one, tasks))
    else:
        runs = [_run_one(t) for t in tasks]
    runs.sort(key=lambda r: (config.models.index(r.model), r.seed))
    write_artifacts(config, out_dir, seeds, runs)
    return runs


def write_artifacts(config, out_dir, seeds, runs):
    digest = config.digest()
    artifacts = []

    def opened(name):
        artifacts.append(name)
        return open(os.path.join(out_dir, name), "w", newline="")

    with opened("results.csv") as f:
        w = csv.writer(f, lineterminator="\n")
        _header(w, config, seeds)
        w.writerow(["model", "seed", "peer", "metric", "mean", "stddev"])
        for r in runs:
            for peer in sorted(r.peer_stats):
                for metric in METRICS:
                    m, sd = r.peer_stats[peer][metric]
                    w.writerow([r.model, r.seed, peer, metric, _fmt(m), _fmt(sd)])

    means = model_means(runs)
    imp = improvements(means)
    if "MESH" in means and len(means) == 1:
        log.warning("only MESH was run; the improvement table is empty")
    with opened("improvement.csv") as f:
        w = csv.writer(f, lineterminator="\n")
        _header(w, config, seeds)
        w.writerow(["model", "metric", "improvement"])
        for model in config.models:
            for metric in METRICS:
                if (model, metric) in imp:
                    w.writerow([model, metric, _fmt(imp[(model, metric)])])

    with opened("flags.csv") as f:
        w = csv.writer(f, lineterminator="\n")
        _header(w, config, seeds)
        w.writerow(["model", "delays", "high_cpu", "slow_connect"])
        for model, row in aggregate_flags(runs).items():
            w.writerow([model, *row])

    with opened("runs.csv") as f:
        w = csv.writer(f, lineterminator="\n")
        _header(w, config, seeds)
        w.writerow(["model", "seed", "delays", "high_cpu", "slow_connect", "constrained_latency_ms",
                    "connect_ms", "ice_ms", "peak_utilization"])
        for r in runs:
            peak = ";".join(f"{p}={max(u):.4f}" for p, u in sorted(r.utilization.items()))
            w.writerow([r.model, r.seed, *r.flags.row(), _fmt(r.constrained_latency_ms),
                        _fmt(r.connect_ms), _fmt(r.ice_ms), peak])

    for r in runs:
        name = f"traces/{r.model}-seed{r.seed}.txt"
        with opened(name) as f:
            f.write(f"# config={config.name} hash={digest} seed={r.seed}\n")
            f.write("\n".join(r.trace) + "\n")
        if os.path.exists(os.path.join(out_dir, f"traces/{r.model}-seed{r.seed}-media.csv")):
            artifacts.append(f"traces/{r.model}-seed{r.seed}-media.csv")

    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    manifest = {"config": config.name, "config_hash": digest, "seeds": seeds, "models": list(config.models),
                "artifacts": sorted(artifacts)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


# -- reading results back ---------------------------------------------------

def _read_csv(path):
    if not os.path.exists(path):
        raise ExperimentError(f"missing {path}")
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    header, body = rows[0], rows[1:]
    return [dict(zip(header, r)) for r in body]


def load_results(out_dir):
    return _read_csv(os.path.join(out_dir, "results.csv"))


def means_from_rows(rows):
    acc = {}
    for r in rows:
        v = float(r["mean"])
        if not math.isnan(v):
            acc.setdefault(r["model"], {}).setdefault(r["metric"], []).append(v)
    return {m: {k: sum(v) / len(v) for k, v in d.items()} for m, d in acc.items()}


@dataclass
class TrendCheck:
    name: str
    status: str  # pass | fail | skipped
    detail: str

    def line(self):
        return f"{self.status.upper():7s} {self.name}: {self.detail}"


def check_trends(means, flags=None):
    """Trend assertions against Mesh plus, when given, the qualitative matrix."""
    checks = []
    needed = [m.value for m in TopologyModel]
    missing = [m for m in needed if m not in means]
    if missing:
        return [TrendCheck("models", "fail", f"missing models {missing}")]
    others = ["SFU", "MCU", "MCUTWO", "MCUMULTI"]
    for metric, label in (("jitter", "a-jitter"), ("jitterBufferDelay", "a-jitterBufferDelay")):
        if means["MESH"].get(metric, 0.0) == 0.0:
            checks.append(TrendCheck(label, "skipped", f"Mesh {metric} is zero; improvement undefined"))
            continue
        imps = {m: improvement(means["MESH"][metric], means[m][metric]) for m in others}
        ok = all(v > 0 for v in imps.values())
        detail = " ".join(f"{m}={v:+.3f}" for m, v in imps.items())
        checks.append(TrendCheck(label, "pass" if ok else "fail", f"improvement > 0: {detail}"))
    lost = {m: means[m]["packetsLost"] for m in needed}
    best = min(v for m, v in lost.items() if m != "MCUTWO")
    detail = " ".join(f"{m}={v:.3f}" for m, v in lost.items())
    checks.append(TrendCheck("b-packetsLost", "pass" if lost["MCUTWO"] < best else "fail",
                             f"MCUTWO strictly lowest: {detail}"))
    ifd = {m: means[m]["totalInterFrameDelay"] for m in needed}
    worst_fast = max(ifd["SFU"], ifd["MCU"])
    best_slow = min(ifd["MESH"], ifd["MCUTWO"], ifd["MCUMULTI"])
    detail = " ".join(f"{m}={v * 1000:.3f}ms" for m, v in ifd.items())
    checks.append(TrendCheck("c-totalInterFrameDelay", "pass" if worst_fast < best_slow else "fail",
                             f"SFU and MCU below the rest: {detail}"))
    if flags is not None:
        diffs = [f"{m}: got {flags.get(m)} want {want}" for m, want in TABLE2.items() if tuple(flags.get(m, ())) != want]
        checks.append(TrendCheck("qualitative-matrix", "fail" if diffs else "pass",
                                 "; ".join(diffs) or "matches Delays/HighCPU/SlowConnect table"))
    return checks


def check_dir(out_dir):
    means = means_from_rows(load_results(out_dir))
    flags = {r["model"]: (r["delays"], r["high_cpu"], r["slow_connect"])
             for r in _read_csv(os.path.join(out_dir, "flags.csv"))}
    return check_trends(means, flags)


# -- figures ----------------------------------------------------------------

def series_points(rows, model, metric, peer_order=None):
    """Result rows of one figure series: run by run, peers in ``peer_order`` within a run."""
    sel = [r for r in rows if r["model"] == model and r["metric"] == metric]
    order = peer_order or sorted({r["peer"] for r in sel})
    sel.sort(key=lambda r: (int(r["seed"]), order.index(r["peer"]) if r["peer"] in order else len(order)))
    return sel


def plot_peer_order(out_dir):
    """Initiator first and the constrained peer last, as recorded in the run's config."""
    with open(os.path.join(out_dir, "config.json")) as f:
        roster = json.load(f)["roster"]
    tail = [roster["constrained"]] if roster.get("constrained") else []
    return [roster["initiator"]] + [p for p in roster["others"] if p not in tail] + tail


def render_plots(out_dir, peer_order=None):
    """One SVG per metric: per-peer points per run with a mean +- 0.5 stddev band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = load_results(out_dir)
    if not rows:
        raise ExperimentError(f"no results in {out_dir}")
    if peer_order is None and os.path.exists(os.path.join(out_dir, "config.json")):
        peer_order = plot_peer_order(out_dir)
    models = list(dict.fromkeys(r["model"] for r in rows))
    paths = []
    plt.rcParams["svg.hashsalt"] = "snow"
    for metric in METRICS:
        fig, ax = plt.subplots(figsize=(8, 4))
        for i, model in enumerate(models):
            sel = series_points(rows, model, metric, peer_order)
            ys = [float(r["mean"]) for r in sel]
            xs = [i + (k + 0.5) / max(len(ys), 1) * 0.8 - 0.4 for k in range(len(ys))]
            sds = [float(r["stddev"]) for r in sel]
            ax.plot(xs, ys, "o-", ms=3, lw=0.8, label=model)
            ax.fill_between(xs, [y - 0.5 * s for y, s in zip(ys, sds)], [y + 0.5 * s for y, s in zip(ys, sds)],
                            alpha=0.25)
        ax.set_xticks(range(len(models)))
        ax.set_xticklabels(models)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} per receiver and run")
        fig.tight_layout()
        path = os.path.join(out_dir, f"{metric}.svg")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths
