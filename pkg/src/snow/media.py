"""Simulated media: frame and packet generation, CPU accounting, jitter buffers.

A frame carries a capture timestamp, the set of origins it shows and a size;
there are no pixels or samples.  Each peer has a CPU split into lanes: encode,
compose and decode each run on their own, as a browser composites a canvas
apart from its encoder threads.  While a peer's demand in the previous
one-second window stays within capacity every job runs at full speed; once
demand exceeds capacity each lane only gets its proportional share, so every
lane falls behind by the same factor demand/capacity.  Encode and compose jobs
that would finish later than two frame intervals are dropped at the sender;
decode jobs are dropped once the render backlog exceeds ``render_backlog_ms``.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field

from .core import AUDIO, VIDEO
from .metrics import InboundStats

TX = "tx"
RX = "rx"
MIX = "mix"
WINDOW_MS = 1000.0


@dataclass
class MediaConfig:
    camera_fps: float = 15.0
    merge_fps: float = 15.0
    video_frame_bytes: int = 30_000
    extra_source_bytes: int = 10_000
    packet_bytes: int = 1200
    audio_pps: float = 50.0
    audio_bytes: int = 160
    encode_cost: float = 2.0
    encode_extra_source_cost: float = 0.5
    decode_cost: float = 1.0
    compose_cost: float = 0.8  # per source per output frame
    audio_cost: float = 0.01
    drop_frame_intervals: float = 2.0
    render_backlog_ms: float = 1000.0
    jb_min_ms: float = 20.0
    jb_max_ms: float = 500.0
    jb_gain: float = 4.0
    audio_excludes_self: bool = False
    media_trace: bool = False

    def __post_init__(self):
        for name in ("camera_fps", "merge_fps", "audio_pps", "packet_bytes", "video_frame_bytes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class MediaPacket:
    track: str
    rtp_seq: int
    capture_ts: float
    size: int
    composition: frozenset
    frame: int = 0
    index: int = 0
    count: int = 1
    origin_ts: float = 0.0


@dataclass
class CpuLedger:
    peer: str
    window: int
    capacity: float
    demand: dict  # category -> work units
    processed: dict

    @property
    def demanded(self):
        return sum(self.demand.values())

    @property
    def utilization(self):
        return self.demanded / self.capacity


class CpuModel:
    def __init__(self, peer, capacity):
        if capacity <= 0:
            raise ValueError("cpu capacity must be positive")
        self.peer = peer
        self.capacity = capacity
        self.busy = {TX: 0.0, RX: 0.0, MIX: 0.0}
        self.demand = defaultdict(lambda: defaultdict(float))
        self.lane_demand = defaultdict(lambda: defaultdict(float))
        self.processed = defaultdict(lambda: defaultdict(float))
        self.dropped = defaultdict(int)

    def factor(self, window):
        """Overload factor demand/capacity of a window, at least 1."""
        total = sum(self.lane_demand.get(window, {}).values())
        return max(1.0, total / self.capacity)

    def rate(self, lane, now):
        prev = self.lane_demand.get(int(now // WINDOW_MS) - 1)
        if not prev:
            return self.capacity
        total = sum(prev.values())
        if total <= self.capacity:
            return self.capacity
        share = prev.get(lane, 0.0) / total if prev.get(lane) else 0.5
        return self.capacity * share

    def account(self, category, work, now, lane=TX):
        w = int(now // WINDOW_MS)
        self.demand[w][category] += work
        self.lane_demand[w][lane] += work

    def submit(self, lane, category, work, now, limit_ms):
        """Queue a job; returns its finish time, or None when it is dropped."""
        self.account(category, work, now, lane)
        service = work / self.rate(lane, now) * 1000.0
        start = max(now, self.busy[lane])
        wait = start - now
        late = wait > limit_ms if lane == RX else wait + service > limit_ms
        if late:
            self.dropped[category] += 1
            return None
        self.busy[lane] = start + service
        self.processed[int(now // WINDOW_MS)][category] += work
        return start + service

    def ledger(self, window):
        return CpuLedger(self.peer, window, self.capacity, dict(self.demand.get(window, {})),
                         dict(self.processed.get(window, {})))

    def utilization(self, n_windows):
        return [self.ledger(w).utilization for w in range(n_windows)]


def adapt_target_delay(jitter_ms, gain=4.0, lo=20.0, hi=500.0):
    return min(max(gain * jitter_ms, lo), hi)


@dataclass
class PlayedFrame:
    frame: int
    capture_ts: float
    origin_ts: float
    composition: frozenset
    size: int
    arrival: float
    playout: float

    @property
    def residency_ms(self):
        return self.playout - self.arrival


class JitterBuffer:
    """Frame-level playout buffer.

    A frame plays at max(arrival of its last packet, capture + offset + target)
    and never before its predecessor.  ``offset`` is a smoothed transit
    estimate that maps sender timestamps onto the receiver clock.  The target
    follows four times the frame-level interarrival jitter, re-evaluated once
    per second.
    """

    OFFSET_GAIN = 1.0 / 32.0

    def __init__(self, target_ms=20.0, min_ms=20.0, max_ms=500.0, gain=4.0, adapt=True):
        self.target_ms = target_ms
        self.min_ms, self.max_ms, self.gain = min_ms, max_ms, gain
        self.adapt = adapt
        self.frames = {}
        self.last_played = -1
        self.last_seq = None
        self.last_playout = -math.inf
        self.cumulative_buffer_delay_s = 0.0
        self.emitted_count = 0
        self.lost = 0
        self.late = 0
        self.offset_ms = None
        self.frame_jitter_ms = 0.0
        self._last_transit = None
        self._last_adapt = None

    def enqueue(self, packet, arrival):
        if packet.frame <= self.last_played:
            self.late += 1
            self.lost += 1
            return False
        f = self.frames.get(packet.frame)
        if f is None:
            f = self.frames[packet.frame] = {
                "capture": packet.capture_ts, "origin": packet.origin_ts,
                "composition": packet.composition, "first_seq": packet.rtp_seq - packet.index,
                "count": packet.count, "got": 0, "size": 0, "arrival": arrival,
            }
        f["got"] += 1
        f["size"] += packet.size
        f["arrival"] = max(f["arrival"], arrival)
        if f["got"] == packet.count or packet.index == packet.count - 1:
            self._observe(f["capture"], f["arrival"])
        return True

    def _observe(self, capture, arrival):
        transit = arrival - capture
        if self.offset_ms is None:
            self.offset_ms = transit
        else:
            self.offset_ms += (transit - self.offset_ms) * self.OFFSET_GAIN
        if self._last_transit is not None:
            self.frame_jitter_ms += (abs(transit - self._last_transit) - self.frame_jitter_ms) / 16.0
        self._last_transit = transit
        # re-evaluated on the first arrival of every one-second window
        window = int(arrival // WINDOW_MS)
        if self.adapt and window != self._last_adapt:
            self._last_adapt = window
            self.target_ms = adapt_target_delay(self.frame_jitter_ms, self.gain, self.min_ms, self.max_ms)

    def playout_time(self, frame_no):
        f = self.frames[frame_no]
        offset = self.offset_ms if self.offset_ms is not None else f["arrival"] - f["capture"]
        deadline = f["capture"] + offset + self.target_ms
        return max(f["arrival"], deadline, self.last_playout)

    def next_playout_time(self):
        if not self.frames:
            return None
        return self.playout_time(min(self.frames))

    def playout(self, now):
        out = []
        while self.frames:
            k = min(self.frames)
            t = self.playout_time(k)
            if t > now + 1e-9:
                break
            f = self.frames.pop(k)
            expected_first = f["first_seq"] if self.last_seq is None else self.last_seq + 1
            self.lost += max(0, f["first_seq"] - expected_first) + (f["count"] - f["got"])
            self.last_seq = f["first_seq"] + f["count"] - 1
            self.last_played = k
            self.last_playout = t
            pf = PlayedFrame(k, f["capture"], f["origin"], f["composition"], f["size"], f["arrival"], t)
            self.cumulative_buffer_delay_s += pf.residency_ms / 1000.0
            self.emitted_count += 1
            out.append(pf)
        return out


def _track_kind(track_id):
    return AUDIO if track_id.endswith(AUDIO) else VIDEO


class MediaPlane:
    """Runs all media of one or more calls on a shared simulator."""

    def __init__(self, sim, network, graph, config=None, cpu_capacity=None):
        self.sim = sim
        self.network = network
        self.graph = graph
        self.config = config or MediaConfig()
        caps = cpu_capacity or {p: prof.cpu_capacity for p, prof in network.profiles.items()}
        self.cpu = {p: CpuModel(p, c) for p, c in caps.items()}
        self.calls = []
        self.inbound = {}
        self.jbs = {}
        self._seq = defaultdict(int)
        self._frame_no = defaultdict(int)
        self.latest_origin = {}
        self.flows = defaultdict(lambda: defaultdict(int))
        self.trace_rows = []
        self._pending_playout = {}

    # -- wiring ----------------------------------------------------------
    def attach(self, call):
        self.calls.append(call)
        call.listeners.append(self)

    def on_connected(self, call, conn):
        pass

    def on_closed(self, call, conn):
        pass

    def start(self, peers):
        c = self.config
        for p in peers:
            rng = self.sim.rng.get(p, "media-phase")
            self._loop(rng.uniform(0, 1000.0 / c.camera_fps), 1000.0 / c.camera_fps, lambda p=p: self._camera_tick(p))
            self._loop(rng.uniform(0, 1000.0 / c.merge_fps), 1000.0 / c.merge_fps, lambda p=p: self._merge_tick(p))
            self._loop(rng.uniform(0, 1000.0 / c.audio_pps), 1000.0 / c.audio_pps, lambda p=p: self._audio_tick(p))
        self._loop(WINDOW_MS, WINDOW_MS, self._snapshot)

    def _loop(self, first, period, fn):
        def tick():
            fn()
            self.sim.schedule_in(period, tick)
        self.sim.schedule(self.sim.now + first, tick)

    def _sending(self, peer, pred):
        for call in self.calls:
            if not call.active:
                continue
            for conn in call.connections.values():
                if conn.phase != "connected":
                    continue
                for t in conn.sends.get(peer, ()):
                    if pred(t):
                        yield call, conn, t

    # -- senders ---------------------------------------------------------
    def _camera_tick(self, peer):
        now = self.sim.now
        vid = f"{peer}/{VIDEO}"
        self.latest_origin[(peer, vid)] = now
        c = self.config
        limit = c.drop_frame_intervals * 1000.0 / c.camera_fps
        comp = frozenset({peer})
        for call, conn, t in list(self._sending(peer, lambda t: t.id == vid)):
            done = self.cpu[peer].submit(TX, "encode", c.encode_cost, now, limit)
            if done is not None:
                self._transmit(peer, conn, t.id, done, now, now, comp, c.video_frame_bytes)

    def _merge_tick(self, peer):
        now = self.sim.now
        c = self.config
        limit = c.drop_frame_intervals * 1000.0 / c.merge_fps
        for call in self.calls:
            if not call.active:
                continue
            for m in call.merges.values():
                if m.owner != peer:
                    continue
                n = len(m.video_sources)
                done = self.cpu[peer].submit(MIX, "compose", c.compose_cost * n, now, limit)
                if done is not None:
                    self.sim.schedule(done, lambda m=m, t=now: self._merge_encode(peer, m, t),
                                      actor=peer, name="composed", detail=m.merge_id)

    def _merge_encode(self, peer, m, tick):
        # encodes run once the composed frame exists; tick is its capture time
        now = self.sim.now
        c = self.config
        limit = c.drop_frame_intervals * 1000.0 / c.merge_fps - (now - tick)
        n = len(m.video_sources)
        out = m.out_stream.track(VIDEO)
        origins = [self.latest_origin[(peer, tid)] for tid, _ in m.video_sources
                   if (peer, tid) in self.latest_origin]
        origin_ts = min(origins) if origins else tick
        comp = self.graph.track_origins(out.id, now)
        size = c.video_frame_bytes + c.extra_source_bytes * max(n - 1, 0)
        work = c.encode_cost + c.encode_extra_source_cost * max(n - 1, 0)
        for _, conn, t in list(self._sending(peer, lambda t: t.id == out.id)):
            done = self.cpu[peer].submit(TX, "encode", work, now, limit)
            if done is not None:
                self._transmit(peer, conn, t.id, done, tick, origin_ts, comp, size)

    def _audio_tick(self, peer):
        now = self.sim.now
        c = self.config
        for _, conn, t in list(self._sending(peer, lambda t: t.kind == AUDIO and ">" not in t.id)):
            self.cpu[peer].account("audio", c.audio_cost, now)
            comp = self.graph.track_origins(t.id, now)
            self._transmit(peer, conn, t.id, now, now, now, comp, c.audio_bytes)

    def _transmit(self, src, conn, track_id, send_time, capture_ts, origin_ts, comp, size):
        c = self.config
        dst = conn.peer_of(src)
        key = (conn.id, track_id)
        n = max(1, math.ceil(size / c.packet_bytes))
        sizes = [c.packet_bytes] * (n - 1) + [size - c.packet_bytes * (n - 1)]
        base = self._seq[key]
        self._seq[key] = base + n
        frame = self._frame_no[key]
        self._frame_no[key] = frame + 1
        arrivals = self.network.transmit(src, dst, send_time, sizes, flow=f"{conn.id}:{track_id}")
        flow = self.flows[key]
        flow["sent"] += n
        packets = []
        for i, (sz, at) in enumerate(zip(sizes, arrivals)):
            if at is None:
                flow["net_dropped"] += 1
                continue
            packets.append((MediaPacket(track_id, base + i, capture_ts, sz, comp, frame, i, n, origin_ts), at))
        if c.media_trace:
            for i in range(n):
                self.trace_rows.append((send_time, src, track_id, "sent", base + i, ""))
        if not packets:
            return
        flow["in_flight"] += len(packets)
        last = max(at for _, at in packets)
        self.sim.schedule(last, lambda: self._arrive(conn, dst, track_id, packets),
                          actor=dst, name="arrive", detail=f"{conn.id}:{track_id}#{frame}")

    # -- receivers -------------------------------------------------------
    def _stats(self, receiver, rid, track_id):
        st = self.inbound.get((receiver, rid))
        if st is None:
            t = self.graph.tracks.get(rid)
            origin = t.origin if t else ""
            st = self.inbound[(receiver, rid)] = InboundStats(receiver, rid, _track_kind(track_id), origin)
            c = self.config
            self.jbs[(receiver, rid)] = JitterBuffer(c.jb_min_ms, c.jb_min_ms, c.jb_max_ms, c.jb_gain)
        return st

    def _arrive(self, conn, dst, track_id, packets):
        flow = self.flows[(conn.id, track_id)]
        flow["in_flight"] -= len(packets)
        if not conn.open:
            flow["discarded"] += len(packets)
            return
        flow["arrived"] += len(packets)
        rid = f"{conn.id}>{dst}:{track_id}"
        st = self._stats(dst, rid, track_id)
        for p, at in packets:
            st.on_packet(p.rtp_seq, p.capture_ts, at)
        if self.config.media_trace:
            for p, at in packets:
                self.trace_rows.append((at, dst, rid, "recv", p.rtp_seq, ""))
        if st.kind == AUDIO:
            self._forward_audio(dst, rid, packets)
            return
        jb = self.jbs[(dst, rid)]
        for p, at in packets:
            jb.enqueue(p, at)
        t = jb.next_playout_time()
        if t is not None:
            t = max(t, self.sim.now)
            if self._pending_playout.get((dst, rid), -1.0) != t:
                self._pending_playout[(dst, rid)] = t
                self.sim.schedule(t, lambda: self._playout(dst, rid), actor=dst, name="playout", detail=rid)

    def _playout(self, dst, rid):
        jb = self.jbs[(dst, rid)]
        st = self.inbound[(dst, rid)]
        now = self.sim.now
        c = self.config
        for f in jb.playout(now):
            st.on_emit(f.residency_ms)
            if c.media_trace:
                self.trace_rows.append((now, dst, rid, "played", f.frame, f"{f.residency_ms:.3f}"))
            done = self.cpu[dst].submit(RX, "decode", c.decode_cost, now, c.render_backlog_ms)
            if done is not None:
                self.sim.schedule(done, lambda f=f: self._render(dst, rid, f), actor=dst, name="render", detail=rid)
        t = jb.next_playout_time()
        if t is not None:
            t = max(t, now)
            if self._pending_playout.get((dst, rid)) != t:
                self._pending_playout[(dst, rid)] = t
                self.sim.schedule(t, lambda: self._playout(dst, rid), actor=dst, name="playout", detail=rid)

    def _render(self, peer, rid, f):
        now = self.sim.now
        self.inbound[(peer, rid)].on_render(now, f.origin_ts)
        self.latest_origin[(peer, rid)] = f.origin_ts
        c = self.config
        limit = c.drop_frame_intervals * 1000.0 / c.camera_fps
        for _, conn, t in list(self._sending(peer, lambda t: t.id == rid)):
            done = self.cpu[peer].submit(TX, "encode", c.encode_cost, now, limit)
            if done is not None:
                self._transmit(peer, conn, rid, done, now, f.origin_ts, f.composition, f.size)

    def _forward_audio(self, peer, rid, packets):
        now = self.sim.now
        for _, conn, t in list(self._sending(peer, lambda t: t.id == rid)):
            self.cpu[peer].account("audio", self.config.audio_cost, now)
            p = packets[0][0]
            self._transmit(peer, conn, rid, now, now, p.origin_ts, p.composition, p.size)

    def _snapshot(self):
        t = self.sim.now / 1000.0
        for st in self.inbound.values():
            st.snapshot(t)

    # -- reporting -------------------------------------------------------
    def utilization(self, peer, n_windows):
        return self.cpu[peer].utilization(n_windows)

    def dump_trace(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["time_ms", "peer", "track", "event", "rtp_seq", "residency_ms"])
            for t, peer, track, ev, seq, res in sorted(self.trace_rows, key=lambda r: (r[0], r[1], r[2], r[4])):
                w.writerow([f"{t:.3f}", peer, track, ev, seq, res])
