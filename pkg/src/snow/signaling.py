"""Signaling envelopes, room rendezvous, an in-simulation bus and a TCP relay server.

Wire format is newline-delimited JSON, one object per message, e.g.::

    {"type":"offer","room":"r1","from":"A","to":"B","seq":3,"sdp":{...}}

The server only relays; it never originates or touches media.
"""

from __future__ import annotations

import asyncio
import json
import logging
from collections import deque
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

DIRECTED = ("offer", "answer", "ice", "bye")
TYPES = ("register",) + DIRECTED + ("error",)
MAX_LINE = 1 << 20


class SignalingError(Exception):
    def __init__(self, code, detail=""):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


class SignalDecodeError(SignalingError):
    def __init__(self, offset, detail):
        super().__init__("malformed", f"{detail} at byte {offset}")
        self.offset = offset


@dataclass
class SignalMessage:
    type: str
    room: str = ""
    sender: str = ""
    to: str = ""
    seq: int = 0
    sdp: dict | None = None
    candidate: dict | None = None
    reason: str | None = None
    code: str | None = None
    detail: str | None = None
    stamp: float | None = None  # arrival stamp added by the relay

    def to_wire(self):
        t = self.type
        if t == "error":
            d = {"type": t, "code": self.code, "detail": self.detail or ""}
        elif t == "register":
            d = {"type": t, "room": self.room, "peer": self.sender, "seq": self.seq}
        else:
            d = {"type": t, "room": self.room, "from": self.sender, "to": self.to, "seq": self.seq}
            if t in ("offer", "answer"):
                d["sdp"] = self.sdp
            elif t == "ice":
                d["candidate"] = self.candidate
            else:
                d["reason"] = self.reason or ""
        if self.stamp is not None:
            d["stamp"] = self.stamp
        return d


def encode(msg):
    return json.dumps(msg.to_wire(), separators=(",", ":")).encode() + b"\n"


def _require(d, key, kind, line):
    if key not in d:
        raise SignalDecodeError(len(line), f"missing field {key!r}")
    v = d[key]
    if not isinstance(v, kind) or isinstance(v, bool) and kind is int:
        raise SignalDecodeError(len(line), f"field {key!r} has wrong type")
    return v


def decode(data):
    """Parse one wire record; raises SignalDecodeError with a byte offset."""
    line = data.rstrip(b"\r\n") if isinstance(data, bytes) else data.rstrip("\r\n").encode()
    try:
        text = line.decode()
    except UnicodeDecodeError as e:
        raise SignalDecodeError(e.start, "invalid utf-8") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SignalDecodeError(len(text[: e.pos].encode()), e.msg) from None
    if not isinstance(d, dict):
        raise SignalDecodeError(0, "record is not an object")
    t = _require(d, "type", str, line)
    if t not in TYPES:
        raise SignalDecodeError(len(line), f"unknown type {t!r}")
    stamp = d.get("stamp")
    if t == "error":
        return SignalMessage("error", code=str(d.get("code", "")), detail=str(d.get("detail", "")), stamp=stamp)
    room = _require(d, "room", str, line)
    seq = _require(d, "seq", int, line)
    if t == "register":
        return SignalMessage("register", room=room, sender=_require(d, "peer", str, line), seq=seq, stamp=stamp)
    msg = SignalMessage(
        t, room=room, sender=_require(d, "from", str, line), to=_require(d, "to", str, line), seq=seq, stamp=stamp
    )
    if t in ("offer", "answer"):
        msg.sdp = _require(d, "sdp", dict, line)
    elif t == "ice":
        msg.candidate = _require(d, "candidate", dict, line)
    else:
        msg.reason = str(d.get("reason", ""))
    return msg


@dataclass
class Room:
    id: str
    members: set = field(default_factory=set)
    mailboxes: dict = field(default_factory=dict)
    last_seq: dict = field(default_factory=dict)
    closed_pairs: set = field(default_factory=set)


class SignalingHub:
    """Room bookkeeping shared by the simulated bus and the TCP server."""

    def __init__(self, max_rooms=None):
        self.rooms = {}
        self.max_rooms = max_rooms
        self.relayed = 0
        self.bytes_relayed = 0

    def register(self, room_id, peer):
        room = self.rooms.get(room_id)
        if room is None:
            if self.max_rooms is not None and len(self.rooms) >= self.max_rooms:
                raise SignalingError("max-rooms", f"room limit {self.max_rooms} reached")
            room = self.rooms[room_id] = Room(room_id)
        if peer in room.members:
            raise SignalingError("duplicate-registration", f"{peer} already in {room_id}")
        room.members.add(peer)
        room.mailboxes[peer] = deque()
        return room

    def unregister(self, room_id, peer):
        room = self.rooms.get(room_id)
        if room is None:
            return
        room.members.discard(peer)
        room.mailboxes.pop(peer, None)
        if not room.members:
            del self.rooms[room_id]

    def relay(self, msg, enqueue=True):
        room = self.rooms.get(msg.room)
        if room is None or msg.sender not in room.members:
            raise SignalingError("not-registered", f"{msg.sender} is not in room {msg.room}")
        if msg.to not in room.members:
            raise SignalingError("unknown-recipient", f"{msg.to} is not in room {msg.room}")
        last = room.last_seq.get(msg.sender)
        if last is not None and msg.seq <= last:
            raise SignalingError("bad-seq", f"seq {msg.seq} after {last}")
        pair = frozenset((msg.sender, msg.to))
        if msg.type == "bye":
            if pair in room.closed_pairs:
                raise SignalingError("closed", f"{msg.sender}-{msg.to} already closed")
            room.closed_pairs.add(pair)
        elif msg.type == "offer":
            room.closed_pairs.discard(pair)
        room.last_seq[msg.sender] = msg.seq
        self.relayed += 1
        if enqueue:
            room.mailboxes[msg.to].append(msg)
        return room

    def poll(self, room_id, peer):
        box = self.rooms[room_id].mailboxes[peer]
        out = list(box)
        box.clear()
        return out


class SimBus:
    """Signaling relay inside the simulation.

    Delivery latency is sender uplink + relay hop + recipient downlink; a
    sender's messages are never reordered.
    """

    SERVER_HOP_MS = 5.0

    def __init__(self, sim, network, room="call"):
        self.sim = sim
        self.network = network
        self.room = room
        self.hub = SignalingHub()
        self.handlers = {}
        self._seq = {}
        self._last_delivery = {}
        self.delivered = []
        self.bytes_relayed = 0

    def register(self, peer, handler):
        self.hub.register(self.room, peer)
        self.handlers[peer] = handler

    def next_seq(self, peer):
        self._seq[peer] = self._seq.get(peer, 0) + 1
        return self._seq[peer]

    def send(self, msg):
        msg.room = self.room
        if not msg.seq:
            msg.seq = self.next_seq(msg.sender)
        try:
            self.hub.relay(msg, enqueue=False)
        except SignalingError as e:
            err = SignalMessage("error", code=e.code, detail=e.detail)
            self.sim.schedule_in(self.SERVER_HOP_MS, lambda: self._deliver(msg.sender, err),
                                 actor="bus", name="error", detail=e.code)
            return None
        self.bytes_relayed += len(encode(msg))
        prof = self.network.profiles
        rng = self.sim.rng.get(msg.sender, "signaling")
        lat = (prof[msg.sender].link.sample_latency(rng) + self.SERVER_HOP_MS
               + prof[msg.to].link.sample_latency(rng))
        t = max(self.sim.now + lat, self._last_delivery.get(msg.sender, 0.0))
        self._last_delivery[msg.sender] = t
        self.sim.schedule(t, lambda: self._deliver(msg.to, msg), actor=msg.to, name=msg.type,
                          detail=f"{msg.sender}->{msg.to}#{msg.seq}")
        return t

    def _deliver(self, peer, msg):
        msg.stamp = self.sim.now
        self.delivered.append((peer, msg))
        handler = self.handlers.get(peer)
        if handler is not None:
            handler(msg)


class SignalingServer:
    """Asyncio NDJSON relay.  Each TCP connection registers one or more (room, peer)."""

    def __init__(self, max_rooms=None, log_path=None):
        self.hub = SignalingHub(max_rooms)
        self.writers = {}
        self.log_path = log_path
        self._log = open(log_path, "a") if log_path else None
        self.server = None
        self.malformed = 0

    async def start(self, host="127.0.0.1", port=0):
        self.server = await asyncio.start_server(self._handle, host, port, limit=MAX_LINE)
        return self.server.sockets[0].getsockname()[:2]

    async def close(self):
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        if self._log:
            self._log.close()
            self._log = None

    def _record(self, msg, size):
        self.hub.bytes_relayed += size
        if self._log:
            self._log.write(f"{msg.type} {msg.room} {msg.sender}->{msg.to} seq={msg.seq} bytes={size}\n")

    async def _send(self, writer, msg):
        writer.write(encode(msg))
        await writer.drain()

    async def _handle(self, reader, writer):
        mine = []
        loop = asyncio.get_running_loop()
        try:
            while True:
                try:
                    line = await reader.readline()
                except (asyncio.LimitOverrunError, ValueError):
                    self.malformed += 1
                    await self._send(writer, SignalMessage("error", code="malformed", detail="line too long"))
                    break
                if not line:
                    break
                if not line.strip():
                    continue
                try:
                    msg = decode(line)
                except SignalDecodeError as e:
                    self.malformed += 1
                    await self._send(writer, SignalMessage("error", code=e.code, detail=e.detail))
                    continue
                try:
                    if msg.type == "register":
                        self.hub.register(msg.room, msg.sender)
                        self.writers[(msg.room, msg.sender)] = writer
                        mine.append((msg.room, msg.sender))
                    elif msg.type == "error":
                        continue
                    else:
                        if (msg.room, msg.sender) not in mine:
                            raise SignalingError("not-registered", f"{msg.sender} not registered on this connection")
                        self.hub.relay(msg, enqueue=False)
                        msg.stamp = loop.time()
                        data = encode(msg)
                        self._record(msg, len(data))
                        target = self.writers[(msg.room, msg.to)]
                        target.write(data)
                        await target.drain()
                except SignalingError as e:
                    await self._send(writer, SignalMessage("error", code=e.code, detail=e.detail))
                except (ConnectionError, KeyError):
                    await self._send(writer, SignalMessage("error", code="unknown-recipient", detail="peer gone"))
        except ConnectionError:
            pass
        finally:
            for room, peer in mine:
                self.writers.pop((room, peer), None)
                self.hub.unregister(room, peer)
            writer.close()


def parse_listen(addr):
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


async def serve(listen="127.0.0.1:8765", max_rooms=None, log_path=None):
    server = SignalingServer(max_rooms, log_path)
    host, port = await server.start(*parse_listen(listen))
    log.info("signaling server listening on %s:%s", host, port)
    try:
        await server.server.serve_forever()
    finally:
        await server.close()
