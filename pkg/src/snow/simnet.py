"""Deterministic discrete-event engine, link models, NAT routing and ICE timing.

All times are simulated milliseconds.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import itertools
import random
from dataclasses import dataclass, field

OPEN = "open"
PUNCHABLE = "punchable"
SYMMETRIC = "symmetric"
NAT_CLASSES = (OPEN, PUNCHABLE, SYMMETRIC)

GATHER_DELAY_MS = (50.0, 200.0)


class SimulationError(Exception):
    pass


class RngStreams:
    """Named random substreams derived from one master seed.

    Each (entity, purpose) pair gets its own generator so that adding a consumer
    never shifts the draws seen by another.
    """

    def __init__(self, seed):
        self.seed = seed
        self._streams = {}

    def get(self, entity, purpose):
        key = (str(entity), str(purpose))
        rng = self._streams.get(key)
        if rng is None:
            digest = hashlib.sha256(f"{self.seed}|{key[0]}|{key[1]}".encode()).digest()
            rng = random.Random(int.from_bytes(digest[:8], "big"))
            self._streams[key] = rng
        return rng


@dataclass(order=True)
class SimEvent:
    time: float
    ordinal: int
    action: object = field(compare=False)
    actor: str = field(default="", compare=False)
    name: str = field(default="", compare=False)
    detail: str = field(default="", compare=False)


class Simulator:
    def __init__(self, seed=0, log_events=False):
        self.now = 0.0
        self.rng = RngStreams(seed)
        self._queue = []
        self._ordinal = itertools.count()
        self.log_events = log_events
        self.event_log = []
        self.processed = 0

    def schedule(self, time, action, actor="", name="", detail=""):
        if time < self.now:
            raise SimulationError(f"cannot schedule at {time} before now={self.now}")
        ev = SimEvent(float(time), next(self._ordinal), action, actor, name, detail)
        heapq.heappush(self._queue, ev)
        return ev

    def schedule_in(self, delay, action, **kw):
        return self.schedule(self.now + delay, action, **kw)

    def advance(self):
        """Execute the next event; None when the queue is empty."""
        if not self._queue:
            return None
        ev = heapq.heappop(self._queue)
        self.now = ev.time
        self.processed += 1
        if self.log_events:
            self.event_log.append((ev.time, ev.ordinal, ev.actor, ev.name, ev.detail))
        ev.action()
        return ev

    def run(self, until=None):
        while self._queue:
            if until is not None and self._queue[0].time > until:
                self.now = until
                return
            self.advance()
        if until is not None:
            self.now = max(self.now, until)

    def pending(self):
        return len(self._queue)

    def dump_event_log(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["time_ms", "ordinal", "actor", "action", "detail"])
            for t, o, actor, name, detail in self.event_log:
                w.writerow([f"{t:.3f}", o, actor, name, detail])


@dataclass(frozen=True)
class LinkModel:
    base_latency_ms: float
    jitter_stddev_ms: float = 0.0
    loss_prob: float = 0.0
    bandwidth_kbps: float = 50_000.0

    def __post_init__(self):
        if self.base_latency_ms < 0 or self.jitter_stddev_ms < 0:
            raise ValueError("latency and jitter must be non-negative")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be in [0, 1]")
        if self.bandwidth_kbps <= 0:
            raise ValueError("bandwidth must be positive")

    def sample_latency(self, rng):
        if self.jitter_stddev_ms == 0:
            return self.base_latency_ms
        while True:
            x = rng.gauss(self.base_latency_ms, self.jitter_stddev_ms)
            if x >= 0:
                return x

    def serialization_ms(self, size_bytes):
        return size_bytes * 8.0 / self.bandwidth_kbps


@dataclass(frozen=True)
class PeerProfile:
    peer: str
    link: LinkModel
    cpu_capacity: float
    nat: str = OPEN

    def __post_init__(self):
        if self.cpu_capacity <= 0:
            raise ValueError(f"{self.peer}: cpu_capacity must be positive")
        if self.nat not in NAT_CLASSES:
            raise ValueError(f"{self.peer}: unknown nat class {self.nat!r}")


@dataclass(frozen=True)
class RelayNode:
    link: LinkModel
    name: str = "relay"


@dataclass(frozen=True)
class Route:
    kind: str  # direct | relayed
    hops: tuple  # (hop name, LinkModel)
    relay: RelayNode | None = None

    @property
    def base_latency_ms(self):
        return sum(link.base_latency_ms for _, link in self.hops)


DEFAULT_RELAY = RelayNode(LinkModel(15.0, 2.0, 0.0, 1_000_000.0))


def route_select(a, b, relay=DEFAULT_RELAY):
    """Direct unless either side sits behind a symmetric NAT."""
    if a.nat != SYMMETRIC and b.nat != SYMMETRIC:
        return Route("direct", ((f"up:{a.peer}", a.link), (f"down:{b.peer}", b.link)))
    r = relay or DEFAULT_RELAY
    return Route(
        "relayed",
        (
            (f"up:{a.peer}", a.link),
            (f"{r.name}:in", r.link),
            (f"{r.name}:out", r.link),
            (f"down:{b.peer}", b.link),
        ),
        r,
    )


def sample_path_ms(route, rng):
    return sum(link.sample_latency(rng) for _, link in route.hops)


def gather_delay(rng):
    return rng.uniform(*GATHER_DELAY_MS)


def ice_negotiate(a, b, rng, relay=DEFAULT_RELAY):
    """Duration of connectivity establishment between two peers.

    gather(a) + gather(b) plus k request/response round trips on the chosen
    route, k = 2 for direct and 4 for relayed paths.
    """
    route = route_select(a, b, relay)
    back = route_select(b, a, relay)
    k = 2 if route.kind == "direct" else 4
    duration = gather_delay(rng) + gather_delay(rng)
    for _ in range(k):
        duration += sample_path_ms(route, rng) + sample_path_ms(back, rng)
    return duration, route


class Network:
    """Per-hop FIFO transmission with burst-correlated latency and Bernoulli loss."""

    def __init__(self, sim, profiles, relay=DEFAULT_RELAY):
        self.sim = sim
        self.profiles = {p.peer: p for p in profiles}
        self.relay = relay
        self._routes = {}
        self._hop_free = {}
        self.sent = 0
        self.dropped = 0

    def route(self, a, b):
        key = (a, b)
        if key not in self._routes:
            self._routes[key] = route_select(self.profiles[a], self.profiles[b], self.relay)
        return self._routes[key]

    def path_latency(self, a, b):
        return self.route(a, b).base_latency_ms

    def transmit(self, src, dst, send_time, sizes, flow=""):
        """Send a burst of packets; returns per-packet arrival time or None if lost.

        One latency sample per hop is shared by the burst (queueing on wireless
        links is correlated at the millisecond scale); serialization spaces the
        packets within each hop.
        """
        route = self.route(src, dst)
        rng = self.sim.rng.get(f"{src}>{dst}", f"net:{flow}")
        times = [float(send_time)] * len(sizes)
        alive = [True] * len(sizes)
        for hop, link in route.hops:
            # downlinks and relay legs are kept per flow so bursts are queued in causal order
            qkey = hop if hop.startswith("up:") else (hop, src, flow)
            free, last_out = self._hop_free.get(qkey, (0.0, 0.0))
            lat = link.sample_latency(rng)
            for i, size in enumerate(sizes):
                if not alive[i]:
                    continue
                dep = max(times[i], free) + link.serialization_ms(size)
                free = dep
                # a queue never lets a later packet overtake an earlier one
                times[i] = last_out = max(dep + lat, last_out)
                if link.loss_prob and rng.random() < link.loss_prob:
                    alive[i] = False
            self._hop_free[qkey] = (free, last_out)
        self.sent += len(sizes)
        out = [t if ok else None for t, ok in zip(times, alive)]
        self.dropped += sum(1 for t in out if t is None)
        return out
