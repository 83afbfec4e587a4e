"""Call establishment procedures for the five serverless topologies.

Every procedure is driven by three hooks (offer received, answer received,
connection connected) executed inside the simulation loop.  All signaling goes
over the in-simulation bus; all media paths are recorded in the MediaGraph so
that compositions can be queried afterwards.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

from . import core
from .core import (
    ATTR_CALL_PARTY,
    ATTR_EXPECT_CALL,
    ATTR_MODEL,
    ATTR_NO_RETURN_MEDIA,
    VIDEO,
    MediaGraph,
    SessionDescription,
)
from .signaling import SignalMessage, SimBus
from .simnet import SYMMETRIC, LinkModel, Network, PeerProfile, Simulator, ice_negotiate

log = logging.getLogger(__name__)

MAX_MULTI_PARTIES = 9


class TopologyModel(str, enum.Enum):
    MESH = "MESH"
    SFU = "SFU"
    MCU = "MCU"
    MCUTWO = "MCUTWO"
    MCUMULTI = "MCUMULTI"

    def accepts(self, n):
        if self is TopologyModel.MCUMULTI:
            return 3 <= n <= MAX_MULTI_PARTIES
        return n == 3


class CallError(Exception):
    pass


class ProtocolViolation(CallError):
    pass


@dataclass(frozen=True)
class CallPlan:
    call_id: str
    model: TopologyModel
    initiator: str
    others: tuple

    def __post_init__(self):
        object.__setattr__(self, "model", TopologyModel(self.model))
        object.__setattr__(self, "others", tuple(self.others))
        if self.initiator in self.others:
            raise CallError("initiator cannot also be listed among the other parties")
        if len(set(self.others)) != len(self.others):
            raise CallError("other parties must be distinct")

    @property
    def parties(self):
        return (self.initiator,) + self.others

    def check_arity(self):
        if not self.model.accepts(len(self.parties)):
            raise CallError(f"{self.model.value} cannot host {len(self.parties)} parties")


PHASES = ("idle", "offered", "answered", "ice", "connected", "closed")


@dataclass
class Connection:
    id: str
    caller: str
    callee: str
    label: str
    sends: dict  # peer -> list of Track it sends on this connection
    attributes: dict
    phase: str = "idle"
    times: dict = field(default_factory=dict)
    ice_ms: float | None = None
    route: object = None
    remote: dict = field(default_factory=dict)  # receiver -> MediaStream

    def advance(self, phase, at):
        if PHASES.index(phase) <= PHASES.index(self.phase):
            raise CallError(f"{self.id}: phase {self.phase} -> {phase} is not forward")
        self.phase = phase
        self.times[phase] = at

    def peer_of(self, peer):
        return self.callee if peer == self.caller else self.caller

    def involves(self, peer):
        return peer in (self.caller, self.callee)

    @property
    def open(self):
        return self.phase != "closed"


@dataclass
class TraceRecord:
    t: float
    src: str
    dst: str
    kind: str  # offer | answer | ice | bye | media-action
    detail: str

    def line(self, with_time=True):
        body = f"dir={self.src}->{self.dst} kind={self.kind} detail={self.detail}"
        return f"t={self.t:.3f} {body}" if with_time else body


@dataclass
class Obligation:
    peer: str
    kind: str
    target: str
    created: float
    discharged: float | None = None


@dataclass(frozen=True)
class ConnectionCensus:
    per_peer_connections: dict
    total: int
    video_encodes: dict
    merges: dict


def _track_label(t):
    if t.id.endswith("/" + t.kind) and "/merge" in t.id:
        return f"{t.kind}:{t.id.rsplit('/', 1)[0]}"
    return f"{t.kind}:{t.origin}"


def _attr_text(attrs):
    return ";".join(f"{k}:{v}" if v else k for k, v in sorted(attrs.items())) or "-"


class Call:
    """One call: plan, connections, merges, obligations and the signaling trace."""

    def __init__(self, plan, sim, network, bus, graph, audio_excludes_self=False, merge_fps=13.0):
        self.plan = plan
        self.merge_fps = merge_fps
        self.sim = sim
        self.network = network
        self.bus = bus
        self.graph = graph
        self.audio_excludes_self = audio_excludes_self
        self.connections = {}
        self.trace = []
        self.obligations = []
        self.merges = {}  # merge id -> MergedStream, video merges owned by the initiator
        self.audio_mixes = {}  # consumer -> audio-only MergedStream
        self.participants = list(plan.parties)
        self.joined = {}
        self.listeners = []
        self.failed = None
        self.ended_at = None
        self.first_offer_at = None
        self.established_at = None
        self._pair_seq = {}
        self.procedure = PROCEDURES[plan.model](self)
        for p in plan.parties:
            graph.local_stream(p)

    # -- bookkeeping -----------------------------------------------------
    def record(self, src, dst, kind, detail):
        self.trace.append(TraceRecord(self.sim.now, src, dst, kind, detail))

    def local(self, peer):
        return self.graph.local_stream(peer)

    def obligation(self, peer, kind, target):
        ob = Obligation(peer, kind, target, self.sim.now)
        self.obligations.append(ob)
        return ob

    def discharge(self, peer, kind, target):
        for ob in self.obligations:
            if ob.peer == peer and ob.kind == kind and ob.target == target:
                if ob.discharged is not None:
                    raise ProtocolViolation(f"{kind}:{target} at {peer} discharged twice")
                ob.discharged = self.sim.now
                return ob
        return None

    def pending(self, peer, kind, target):
        return any(
            ob.peer == peer and ob.kind == kind and ob.target == target and ob.discharged is None
            for ob in self.obligations
        )

    @property
    def active(self):
        return self.failed is None and self.ended_at is None

    def open_connections(self):
        return [c for c in self.connections.values() if c.open]

    def conn(self, label):
        for c in self.connections.values():
            if c.label == label:
                return c
        raise KeyError(label)

    # -- merges ----------------------------------------------------------
    def create_merge(self, fps=None):
        m = self.graph.merge_create(self.plan.initiator, fps or self.merge_fps)
        self.merges[m.merge_id] = m
        self.record(m.owner, m.owner, "media-action", f"merge-create id={m.merge_id}")
        return m

    def merge_add(self, m, stream):
        m.add(stream, self.sim.now)
        origins = ",".join(sorted({t.origin for t in stream.tracks}))
        self.record(m.owner, m.owner, "media-action", f"merge-add id={m.merge_id} src={origins}")

    # -- signaling -------------------------------------------------------
    def offer(self, caller, callee, sends, label, attrs=None):
        seq = self._pair_seq.get((caller, callee), 0) + 1
        self._pair_seq[(caller, callee)] = seq
        cid = core.connection_id(caller, callee, seq)
        attributes = {ATTR_MODEL: self.plan.model.value}
        attributes.update(attrs or {})
        conn = Connection(cid, caller, callee, label, {caller: list(sends), callee: []}, attributes)
        self.connections[cid] = conn
        conn.advance("offered", self.sim.now)
        if self.first_offer_at is None:
            self.first_offer_at = self.sim.now
        self._send_sdp("offer", conn, caller, callee, conn.sends[caller], attributes)
        self._send_candidates(conn, caller, callee)
        return conn

    def reoffer(self, conn, attrs):
        """Offer on an existing connection that only carries coordination attributes."""
        attributes = {ATTR_MODEL: self.plan.model.value}
        attributes.update(attrs)
        self._send_sdp("offer", conn, conn.caller, conn.callee, conn.sends[conn.caller], attributes, reoffer=True)

    def _send_sdp(self, kind, conn, sender, receiver, tracks, attrs, reoffer=False):
        sd = SessionDescription(
            kind, sender, receiver, [(t.kind, t.id, t.origin) for t in tracks], dict(attrs)
        ).validate()
        payload = sd.to_dict()
        payload.update(call=self.plan.call_id, conn=conn.id, reoffer=reoffer)
        labels = ",".join(_track_label(t) for t in tracks) or "-"
        self.record(sender, receiver, kind, f"conn={conn.id} tracks={labels} attrs={_attr_text(attrs)}")
        self.bus.send(SignalMessage(kind, sender=sender, to=receiver, sdp=payload))

    def _send_candidates(self, conn, sender, receiver):
        nat = self.network.profiles[sender].nat
        cands = ["host", "srflx"] + (["relay"] if nat == SYMMETRIC else [])
        for i, c in enumerate(cands):
            self.record(sender, receiver, "ice", f"conn={conn.id} cand={c}")
            self.bus.send(SignalMessage("ice", sender=sender, to=receiver,
                                        candidate={"conn": conn.id, "type": c, "priority": len(cands) - i}))

    def on_signal(self, peer, msg):
        if not self.active:
            return
        try:
            if msg.type == "offer":
                self._on_offer(peer, msg)
            elif msg.type == "answer":
                self._on_answer(peer, msg)
            elif msg.type == "bye":
                self._on_bye(peer, msg)
            elif msg.type == "error":
                if msg.code == "closed":
                    # both ends may say bye for the same pair during a hangup
                    return
                raise CallError(f"signaling error at {peer}: {msg.code} {msg.detail}")
        except CallError as e:
            self.abort(str(e))

    def _on_offer(self, peer, msg):
        sdp = msg.sdp
        if sdp.get("call") != self.plan.call_id:
            raise ProtocolViolation(f"{peer} got an offer for unknown call {sdp.get('call')}")
        conn = self.connections[sdp["conn"]]
        attrs = sdp.get("attributes", {})
        if sdp.get("reoffer"):
            self.procedure.on_reoffer(peer, conn, attrs)
            self._send_sdp("answer", conn, peer, conn.caller, conn.sends[peer], {}, reoffer=True)
            return
        sends = self.procedure.accept(peer, conn, attrs)
        conn.sends[peer] = list(sends)
        self._send_sdp("answer", conn, peer, conn.caller, conn.sends[peer], {})
        self._send_candidates(conn, peer, conn.caller)
        self.procedure.after_answer_sent(peer, conn, attrs)

    def _on_answer(self, peer, msg):
        conn = self.connections[msg.sdp["conn"]]
        if msg.sdp.get("reoffer"):
            self.procedure.on_reanswer(conn)
            return
        conn.advance("answered", self.sim.now)
        a = self.network.profiles[conn.caller]
        b = self.network.profiles[conn.callee]
        rng = self.sim.rng.get(conn.id, "ice")
        conn.ice_ms, conn.route = ice_negotiate(a, b, rng, self.network.relay)
        connected_at = self.sim.now + conn.ice_ms
        for receiver in (conn.caller, conn.callee):
            tracks = conn.sends[conn.peer_of(receiver)]
            if tracks:
                lat = self.network.path_latency(conn.peer_of(receiver), receiver)
                conn.remote[receiver] = self.graph.add_remote(receiver, conn.id, tracks, lat, connected_at)
        conn.advance("ice", self.sim.now)
        self.sim.schedule(connected_at, lambda: self._connected(conn), actor=conn.caller,
                          name="connected", detail=conn.id)
        self.procedure.on_answered(conn)

    def _connected(self, conn):
        if not self.active or not conn.open:
            return
        conn.advance("connected", self.sim.now)
        self.record(conn.caller, conn.callee, "media-action", f"connected conn={conn.id}")
        for p in (conn.caller, conn.callee):
            self.joined.setdefault(p, self.sim.now)
        for listener in self.listeners:
            listener.on_connected(self, conn)
        self.procedure.on_connected(conn)
        if self.established_at is None and self.procedure.complete():
            self.established_at = self.sim.now

    def _on_bye(self, peer, msg):
        pass

    def close_connection(self, conn, by, reason):
        if not conn.open:
            return
        conn.phase = "closed"
        conn.times["closed"] = self.sim.now
        other = conn.peer_of(by)
        self.record(by, other, "bye", f"conn={conn.id} reason={reason}")
        self.bus.send(SignalMessage("bye", sender=by, to=other, reason=reason))
        for stream in conn.remote.values():
            self.graph.close_remote(stream.id, self.sim.now)
        for listener in self.listeners:
            listener.on_closed(self, conn)

    def abort(self, reason):
        if self.failed is not None:
            return
        self.failed = reason
        log.info("call %s aborted: %s", self.plan.call_id, reason)
        for conn in list(self.connections.values()):
            self.close_connection(conn, conn.caller, "abort")

    # -- queries ---------------------------------------------------------
    def received_streams(self, peer):
        return [c.remote[peer] for c in self.open_connections() if peer in c.remote]

    def received_composition(self, peer, at=None):
        at = self.sim.now if at is None else at
        out = set()
        for s in self.received_streams(peer):
            out |= self.graph.composition_of(s.id, at)
        return out

    def ice_durations(self):
        return [c.ice_ms for c in self.connections.values() if c.ice_ms is not None]


class Procedure:
    def __init__(self, call):
        self.call = call
        self.plan = call.plan

    @property
    def initiator(self):
        return self.plan.initiator

    def start(self):
        raise NotImplementedError

    def accept(self, peer, conn, attrs):
        """Decide what the callee sends back; raise ProtocolViolation to reject."""
        if conn.caller != self.initiator:
            raise ProtocolViolation(f"{peer} rejects unexpected call from {conn.caller}")
        return self.call.local(peer).tracks

    def after_answer_sent(self, peer, conn, attrs):
        pass

    def on_reoffer(self, peer, conn, attrs):
        pass

    def on_reanswer(self, conn):
        pass

    def on_answered(self, conn):
        pass

    def on_connected(self, conn):
        pass

    def expected_connections(self):
        return len(self.plan.parties) - 1

    def complete(self):
        done = [c for c in self.call.connections.values() if c.phase == "connected"]
        return len(done) >= self.expected_connections()

    def on_leave(self, leaver):
        pass


class MeshProcedure(Procedure):
    """Everyone connects to everyone; the third party calls the second itself."""

    def start(self):
        a, (b, c) = self.initiator, self.plan.others
        self.call.offer(a, b, self.call.local(a).tracks, "conn-AB")

    def on_answered(self, conn):
        a, (b, c) = self.initiator, self.plan.others
        if conn.label == "conn-AB":
            self.call.reoffer(conn, {ATTR_EXPECT_CALL: c})

    def on_reoffer(self, peer, conn, attrs):
        if ATTR_EXPECT_CALL in attrs:
            self.call.obligation(peer, "expect-call", attrs[ATTR_EXPECT_CALL])

    def on_reanswer(self, conn):
        a, (b, c) = self.initiator, self.plan.others
        self.call.offer(a, c, self.call.local(a).tracks, "conn-AC", {ATTR_CALL_PARTY: b})

    def accept(self, peer, conn, attrs):
        if conn.caller != self.initiator:
            if not self.call.pending(peer, "expect-call", conn.caller):
                raise ProtocolViolation(f"{peer} rejects unannounced call from {conn.caller}")
            self.call.discharge(peer, "expect-call", conn.caller)
        elif ATTR_CALL_PARTY in attrs:
            self.call.obligation(peer, "call-party", attrs[ATTR_CALL_PARTY])
        return self.call.local(peer).tracks

    def after_answer_sent(self, peer, conn, attrs):
        target = attrs.get(ATTR_CALL_PARTY)
        if conn.caller == self.initiator and target:
            self.call.discharge(peer, "call-party", target)
            self.call.offer(peer, target, self.call.local(peer).tracks, "conn-CB")

    def expected_connections(self):
        return 3


class SfuProcedure(Procedure):
    """Initiator forwards individual tracks; the last party sees two separate streams."""

    def start(self):
        a, (b, c) = self.initiator, self.plan.others
        self.call.offer(a, b, self.call.local(a).tracks, "conn-A")

    def second_leg(self, conn_a):
        a, (b, c) = self.initiator, self.plan.others
        return list(self.call.local(a).tracks) + list(conn_a.remote[a].tracks)

    def on_connected(self, conn):
        a, (b, c) = self.initiator, self.plan.others
        if conn.label == "conn-A":
            self.call.offer(a, c, self.second_leg(conn), "conn-B")
        elif conn.label == "conn-B":
            # the forwarded stream exists once C's first media has reached A
            delay = self.call.network.path_latency(c, a)
            self.call.sim.schedule_in(delay, lambda: self._third_leg(conn), actor=a, name="media-ready",
                                      detail=conn.id)

    def _third_leg(self, conn_b):
        if not self.call.active or not conn_b.open:
            return
        a, (b, c) = self.initiator, self.plan.others
        self.call.offer(a, b, conn_b.remote[a].tracks, "conn-C", {ATTR_NO_RETURN_MEDIA: ""})

    def accept(self, peer, conn, attrs):
        super().accept(peer, conn, attrs)
        if ATTR_NO_RETURN_MEDIA in attrs:
            return []
        return self.call.local(peer).tracks

    def expected_connections(self):
        return 3


class McuProcedure(SfuProcedure):
    """Like SFU, but the third party receives the initiator and second party merged."""

    def second_leg(self, conn_a):
        a = self.initiator
        m = self.call.create_merge()
        self.call.merge_add(m, self.call.local(a))
        self.call.merge_add(m, conn_a.remote[a])
        return m.out_stream.tracks


class McuTwoProcedure(Procedure):
    """Two merges at the initiator, each hiding its consumer's own media."""

    def start(self):
        a, (b, c) = self.initiator, self.plan.others
        self.m1 = self.call.create_merge()
        self.m2 = self.call.create_merge()
        self.call.merge_add(self.m1, self.call.local(a))
        self.call.merge_add(self.m2, self.call.local(a))
        self.call.offer(a, b, self.m1.out_stream.tracks, "conn-A")

    def on_answered(self, conn):
        a, (b, c) = self.initiator, self.plan.others
        if conn.label == "conn-A":
            self.call.merge_add(self.m2, conn.remote[a])
            self.call.offer(a, c, self.m2.out_stream.tracks, "conn-B")
        elif conn.label == "conn-B":
            self.call.merge_add(self.m1, conn.remote[a])

    def expected_connections(self):
        return 2

    def on_leave(self, leaver):
        # whichever merge was dedicated to the leaver no longer has a consumer
        pass


class McuMultiProcedure(Procedure):
    """One shared merge; every party sees everyone including itself."""

    def start(self):
        a = self.initiator
        self.merge = self.call.create_merge()
        self.call.merge_add(self.merge, self.call.local(a))
        self.queue = list(self.plan.others)
        self._next()

    def _stream_for(self, peer):
        video = self.merge.out_stream.track(VIDEO)
        if not self.call.audio_excludes_self:
            return self.merge.out_stream.tracks
        mix = self.call.graph.merge_create(self.initiator, self.call.merge_fps, kinds=(core.AUDIO,))
        mix.add(self.call.local(self.initiator), self.call.sim.now)
        for c in self.call.open_connections():
            other = c.peer_of(self.initiator)
            if other != peer and self.initiator in c.remote:
                mix.add(c.remote[self.initiator], self.call.sim.now)
        self.call.audio_mixes[peer] = mix
        self.call.record(self.initiator, self.initiator, "media-action", f"audio-mix-create id={mix.merge_id} for={peer}")
        return [video, mix.out_stream.track(core.AUDIO)]

    def _next(self):
        if self.queue:
            peer = self.queue.pop(0)
            self.call.offer(self.initiator, peer, self._stream_for(peer), f"conn-{peer}")

    def add_party(self, peer):
        self.call.participants.append(peer)
        self.call.graph.local_stream(peer)
        self.queue.append(peer)
        if not any(c.phase == "offered" for c in self.call.connections.values()):
            self._next()

    def on_answered(self, conn):
        a = self.initiator
        remote = conn.remote[a]
        self.call.merge_add(self.merge, remote)
        for consumer, mix in self.call.audio_mixes.items():
            if consumer != conn.callee:
                mix.add(remote, self.call.sim.now)
        self._next()

    def expected_connections(self):
        return len(self.call.participants) - 1


PROCEDURES = {
    TopologyModel.MESH: MeshProcedure,
    TopologyModel.SFU: SfuProcedure,
    TopologyModel.MCU: McuProcedure,
    TopologyModel.MCUTWO: McuTwoProcedure,
    TopologyModel.MCUMULTI: McuMultiProcedure,
}


def default_profiles(peers):
    return [PeerProfile(p, LinkModel(20.0, 2.0), 400.0) for p in peers]


@dataclass
class CallSetup:
    sim: Simulator
    network: Network
    bus: SimBus
    graph: MediaGraph


def new_setup(profiles, seed=0, relay=None, log_events=False):
    sim = Simulator(seed, log_events=log_events)
    net = Network(sim, profiles, relay) if relay else Network(sim, profiles)
    return CallSetup(sim, net, SimBus(sim, net), MediaGraph())


def start_call(plan, setup, audio_excludes_self=False, merge_fps=13.0):
    """Register all parties and kick off the procedure; events run on setup.sim."""
    plan.check_arity()
    missing = [p for p in plan.parties if p not in setup.network.profiles]
    if missing:
        raise CallError(f"no network profile for {missing}")
    call = Call(plan, setup.sim, setup.network, setup.bus, setup.graph, audio_excludes_self, merge_fps)
    for p in plan.parties:
        setup.bus.register(p, lambda msg, p=p: call.on_signal(p, msg))
    call.procedure.start()
    return call


def establish(plan, profiles=None, seed=0, audio_excludes_self=False, until=None):
    """Run a call setup to completion with no media and return the Call."""
    setup = new_setup(profiles or default_profiles(plan.parties), seed)
    call = start_call(plan, setup, audio_excludes_self)
    setup.sim.run(until)
    return call


def add_party_multi(call, new, profile=None):
    if call.plan.model is not TopologyModel.MCUMULTI:
        raise CallError("parties can only be added to MCUMULTI calls")
    if new in call.participants:
        raise CallError(f"{new} already participates")
    if len(call.participants) + 1 > MAX_MULTI_PARTIES:
        raise CallError("party cap reached")
    if new not in call.network.profiles:
        call.network.profiles[new] = profile or PeerProfile(new, LinkModel(20.0, 2.0), 400.0)
    call.bus.register(new, lambda msg: call.on_signal(new, msg))
    call.procedure.add_party(new)
    return call


def hangup(call, leaver):
    """Leaver drops out; the call survives only if the initiator and one more party remain."""
    if leaver not in call.participants:
        raise CallError(f"{leaver} is not in call {call.plan.call_id}")
    now = call.sim.now
    for conn in call.open_connections():
        if conn.involves(leaver):
            call.close_connection(conn, leaver, "hangup")
    for m in list(call.merges.values()) + list(call.audio_mixes.values()):
        if any(o == leaver for _, o in m.video_sources + m.audio_sources):
            m.remove(leaver, now)
            call.record(m.owner, m.owner, "media-action", f"merge-remove id={m.merge_id} src={leaver}")
    call.audio_mixes.pop(leaver, None)
    # forwarded tracks whose origin left carry nothing any more
    for conn in call.open_connections():
        for peer in (conn.caller, conn.callee):
            conn.sends[peer] = [t for t in conn.sends[peer] if not (t.origin == leaver and "/merge" not in t.id)]
        if not conn.sends[conn.caller] and not conn.sends[conn.callee]:
            call.close_connection(conn, conn.caller, "no-media")
    call.participants.remove(leaver)
    call.procedure.on_leave(leaver)
    remaining = call.participants
    if call.plan.initiator not in remaining or len(remaining) < 2:
        for conn in call.open_connections():
            call.close_connection(conn, conn.caller, "teardown")
        call.ended_at = now
    return call


def census(call):
    per_peer = {p: 0 for p in call.participants}
    encodes = {p: 0 for p in call.participants}
    merges = {p: 0 for p in call.participants}
    conns = call.open_connections()
    for c in conns:
        for p in (c.caller, c.callee):
            per_peer[p] = per_peer.get(p, 0) + 1
            encodes[p] = encodes.get(p, 0) + sum(1 for t in c.sends[p] if t.kind == VIDEO)
    for m in call.merges.values():
        merges[m.owner] = merges.get(m.owner, 0) + 1
    return ConnectionCensus(per_peer, len(conns), encodes, merges)


def golden_lines(call):
    """Trace projection compared against golden files: no times, ICE or connectivity lines."""
    return [
        r.line(with_time=False)
        for r in call.trace
        if r.kind != "ice" and not r.detail.startswith("connected ")
    ]
