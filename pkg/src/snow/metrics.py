"""inbound-rtp style statistics, window summaries, improvement over Mesh and qualitative flags."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

METRICS = ("packetsLost", "jitterBufferDelay", "totalInterFrameDelay", "jitter")

# calibration constants for the qualitative detectors; not taken from measurements
DELAY_THRESHOLD_MS = 350.0
HIGH_CPU_UTILIZATION = 0.9
HIGH_CPU_SUSTAIN_S = 5
SLOW_CONNECT_RATIO = 1.8


class MetricsError(Exception):
    pass


def jitter_update(j, transit_prev, transit_now):
    """Interarrival jitter recurrence J' = J + (|D| - J) / 16.

    ``transit`` is arrival minus capture timestamp for consecutive packets, so
    D = (arrival_now - arrival_prev) - (capture_now - capture_prev).
    """
    d = abs(transit_now - transit_prev)
    return j + (d - j) / 16.0


@dataclass
class Snapshot:
    t: float  # seconds
    packets_received: int
    packets_lost: int
    jitter: float
    jitter_buffer_delay: float
    jitter_buffer_emitted: int
    total_inter_frame_delay: float
    frames_rendered: int


@dataclass
class InboundStats:
    """Counters for one received track at one receiver."""

    receiver: str
    track: str
    kind: str
    origin: str
    packets_received: int = 0
    first_seq: int | None = None
    highest_seq: int = -1
    jitter: float = 0.0  # seconds
    jitter_buffer_delay: float = 0.0  # seconds, cumulative
    jitter_buffer_emitted: int = 0
    total_inter_frame_delay: float = 0.0  # seconds, cumulative
    frames_rendered: int = 0
    last_render_ms: float | None = None
    latency_samples: list = field(default_factory=list)  # (render_ms, capture_to_render_ms)
    snapshots: list = field(default_factory=list)
    _last_transit: float | None = None

    @property
    def packets_lost(self):
        if self.first_seq is None:
            return 0
        return max(0, self.highest_seq - self.first_seq + 1 - self.packets_received)

    def on_packet(self, rtp_seq, capture_ms, arrival_ms):
        if self.first_seq is None:
            self.first_seq = rtp_seq
        self.highest_seq = max(self.highest_seq, rtp_seq)
        self.packets_received += 1
        transit = (arrival_ms - capture_ms) / 1000.0
        if self._last_transit is not None:
            self.jitter = jitter_update(self.jitter, self._last_transit, transit)
        self._last_transit = transit

    def on_emit(self, residency_ms):
        self.jitter_buffer_delay += residency_ms / 1000.0
        self.jitter_buffer_emitted += 1

    def on_render(self, render_ms, origin_ms):
        if self.last_render_ms is not None:
            self.total_inter_frame_delay += (render_ms - self.last_render_ms) / 1000.0
        self.last_render_ms = render_ms
        self.frames_rendered += 1
        self.latency_samples.append((render_ms, render_ms - origin_ms))

    def snapshot(self, t_s):
        self.snapshots.append(
            Snapshot(
                t_s,
                self.packets_received,
                self.packets_lost,
                self.jitter,
                self.jitter_buffer_delay,
                self.jitter_buffer_emitted,
                self.total_inter_frame_delay,
                self.frames_rendered,
            )
        )


def _mean_std(values, weights=None):
    if not values:
        return float("nan"), float("nan")
    if weights is None:
        weights = [1.0] * len(values)
    w = sum(weights)
    if w == 0:
        return float("nan"), float("nan")
    mean = sum(v * wi for v, wi in zip(values, weights)) / w
    var = sum(wi * (v - mean) ** 2 for v, wi in zip(values, weights)) / w
    return mean, math.sqrt(max(var, 0.0))


def window_summarize(samples, warmup_s, measure_s):
    """Mean and standard deviation of each metric over [warmup, warmup + measure].

    ``samples`` are Snapshots taken once per second.  packetsLost is reported as
    a per-second rate; jitterBufferDelay and totalInterFrameDelay are reported
    per emitted / rendered frame, weighting each one-second increment by its
    frame count so that the mean is exactly the end-minus-start ratio.
    """
    end = warmup_s + measure_s
    if not samples or samples[-1].t + 1e-9 < end:
        raise MetricsError(f"run of {samples[-1].t if samples else 0}s is shorter than {end}s")
    window = [s for s in samples if warmup_s - 1e-9 <= s.t <= end + 1e-9]
    if len(window) < 2:
        raise MetricsError("measurement window holds fewer than two samples")
    pairs = list(zip(window, window[1:]))
    lost = [(b.packets_lost - a.packets_lost) / (b.t - a.t) for a, b in pairs]
    jbd, jbd_w, ifd, ifd_w = [], [], [], []
    for a, b in pairs:
        n = b.jitter_buffer_emitted - a.jitter_buffer_emitted
        if n > 0:
            jbd.append((b.jitter_buffer_delay - a.jitter_buffer_delay) / n)
            jbd_w.append(n)
        n = b.frames_rendered - a.frames_rendered
        if n > 0:
            ifd.append((b.total_inter_frame_delay - a.total_inter_frame_delay) / n)
            ifd_w.append(n)
    return {
        "packetsLost": _mean_std(lost),
        "jitterBufferDelay": _mean_std(jbd, jbd_w),
        "totalInterFrameDelay": _mean_std(ifd, ifd_w),
        "jitter": _mean_std([s.jitter for s in window]),
    }


def improvement(mesh_value, model_value):
    """(mesh - metric) / mesh; positive means the model beat Mesh."""
    if mesh_value == 0:
        raise MetricsError("improvement over a zero Mesh value is undefined")
    return (mesh_value - model_value) / mesh_value


@dataclass(frozen=True)
class QualitativeFlags:
    delays: bool
    high_cpu: bool
    slow_connect: bool

    def row(self):
        return tuple("YES" if v else "NO" for v in (self.delays, self.high_cpu, self.slow_connect))


@dataclass(frozen=True)
class Thresholds:
    delay_ms: float = DELAY_THRESHOLD_MS
    high_cpu_utilization: float = HIGH_CPU_UTILIZATION
    high_cpu_sustain_s: int = HIGH_CPU_SUSTAIN_S
    slow_connect_ratio: float = SLOW_CONNECT_RATIO


def sustained_overload(utilizations, threshold=HIGH_CPU_UTILIZATION, seconds=HIGH_CPU_SUSTAIN_S):
    run = 0
    for u in utilizations:
        run = run + 1 if u > threshold else 0
        if run >= seconds:
            return True
    return False


def qualitative_flags(run, thresholds=Thresholds()):
    """Delays / High CPU / Slow Connect for one finished run.

    ``run`` needs: ``constrained_latency_ms`` (mean capture-to-render latency at
    the constrained peer), ``utilization`` (peer -> per-second utilization list)
    and ``connect_ms`` / ``ice_ms`` (first offer to all media flowing, and the
    run's mean single-connection ICE duration).
    """
    th = thresholds
    delays = run.constrained_latency_ms > th.delay_ms
    high_cpu = any(sustained_overload(u, th.high_cpu_utilization, th.high_cpu_sustain_s)
                   for u in run.utilization.values())
    slow = run.connect_ms >= th.slow_connect_ratio * run.ice_ms
    return QualitativeFlags(delays, high_cpu, slow)
