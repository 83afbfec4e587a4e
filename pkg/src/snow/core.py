"""Shared domain types: tracks, streams, session descriptions and stream merging.

Composition is tracked structurally in a :class:`MediaGraph`.  Every track is a
node that is either a local capture, the output of a merge, or the receiving end
of a connection.  ``composition_of`` answers "whose media does this stream carry
at time t" by walking that graph, which is what the topology tests use as their
oracle for what a viewer sees.
"""

from __future__ import annotations

import bisect
import itertools
import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

VIDEO = "video"
AUDIO = "audio"
KINDS = (VIDEO, AUDIO)

ATTR_EXPECT_CALL = "x-snow-expect-call"
ATTR_CALL_PARTY = "x-snow-call-party"
ATTR_MODEL = "x-snow-model"
ATTR_NO_RETURN_MEDIA = "x-snow-no-return-media"
REGISTERED_ATTRIBUTES = frozenset(
    {ATTR_EXPECT_CALL, ATTR_CALL_PARTY, ATTR_MODEL, ATTR_NO_RETURN_MEDIA}
)


class MediaError(Exception):
    pass


class DuplicateSourceError(MediaError):
    """A merge already holds a source with the same origin and kind."""


def connection_id(caller, callee, seq):
    return f"{caller}-{callee}#{seq}"


def parse_connection_id(conn_id):
    pair, seq = conn_id.rsplit("#", 1)
    caller, callee = pair.split("-", 1)
    return caller, callee, int(seq)


@dataclass(frozen=True)
class Track:
    id: str
    kind: str
    origin: str
    synthetic_label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown track kind {self.kind!r}")


@dataclass
class MediaStream:
    id: str
    tracks: list
    provenance: str = "local"  # local | remote | merged
    ref: str | None = None  # ConnectionId for remote, merge id for merged

    def __post_init__(self):
        seen = set()
        for t in self.tracks:
            key = (t.origin, t.kind)
            if key in seen:
                raise MediaError(f"stream {self.id} has two {t.kind} tracks from {t.origin}")
            seen.add(key)

    def track(self, kind):
        for t in self.tracks:
            if t.kind == kind:
                return t
        return None


@dataclass
class SessionDescription:
    kind: str  # offer | answer
    sender: str
    receiver: str
    media_lines: list = field(default_factory=list)  # (kind, track_id, origin)
    attributes: dict = field(default_factory=dict)

    def validate(self):
        if self.kind not in ("offer", "answer"):
            raise ValueError(f"bad sdp kind {self.kind!r}")
        unknown = set(self.attributes) - REGISTERED_ATTRIBUTES
        if unknown:
            raise ValueError(f"unregistered sdp attributes {sorted(unknown)}")
        return self

    def to_dict(self):
        return {
            "kind": self.kind,
            "from": self.sender,
            "to": self.receiver,
            "media": [{"kind": k, "track": t, "origin": o} for k, t, o in self.media_lines],
            "attributes": dict(self.attributes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            sender=d["from"],
            receiver=d["to"],
            media_lines=[(m["kind"], m["track"], m["origin"]) for m in d.get("media", [])],
            attributes=dict(d.get("attributes", {})),
        )


@dataclass(frozen=True)
class LayoutPolicy:
    rule: str  # empty | full | side_by_side | grid
    rows: int
    cols: int
    cells: tuple  # source index -> (row, col)


def layout_for(n):
    """Fixed layout by source count: full, side by side, 2x2, 3x3."""
    if n < 0 or n > 9:
        raise ValueError(f"no layout for {n} sources")
    if n == 0:
        return LayoutPolicy("empty", 0, 0, ())
    if n == 1:
        return LayoutPolicy("full", 1, 1, ((0, 0),))
    if n == 2:
        return LayoutPolicy("side_by_side", 1, 2, ((0, 0), (0, 1)))
    side = 2 if n <= 4 else 3
    return LayoutPolicy("grid", side, side, tuple(divmod(i, side) for i in range(n)))


class _LocalNode:
    def __init__(self, origin):
        self.origin = origin


class _MergeNode:
    def __init__(self):
        self.times = [0.0]
        self.sources = [()]

    def set(self, at, sources):
        if at < self.times[-1]:
            raise MediaError("merge history must be appended in time order")
        if at == self.times[-1]:
            self.sources[-1] = tuple(sources)
        else:
            self.times.append(at)
            self.sources.append(tuple(sources))

    def at(self, t):
        i = bisect.bisect_right(self.times, t) - 1
        return self.sources[max(i, 0)]


class _RemoteNode:
    def __init__(self, source, latency_ms, connected_at):
        self.source = source
        self.latency_ms = latency_ms
        self.connected_at = connected_at
        self.closed_at = None


class MergedStream:
    """A live composition owned by one peer.

    The output stream exists from creation on and never changes identity, so it
    can be attached to connections before any source is added.
    """

    def __init__(self, graph, merge_id, owner, fps, kinds=KINDS):
        self.graph = graph
        self.merge_id = merge_id
        self.owner = owner
        self.output_fps = fps
        self.kinds = tuple(kinds)
        self.video_sources = []  # (track_id, origin)
        self.audio_sources = []
        tracks = [
            Track(f"{merge_id}/{k}", k, owner, synthetic_label=f"merge:{merge_id}")
            for k in self.kinds
        ]
        self.out_stream = MediaStream(f"{merge_id}/out", tracks, "merged", merge_id)
        self.layout = layout_for(0)

    def _sources(self, kind):
        return self.video_sources if kind == VIDEO else self.audio_sources

    def source_origins(self):
        seen = []
        for _, o in self.video_sources + self.audio_sources:
            if o not in seen:
                seen.append(o)
        return seen

    def add(self, stream, at=0.0):
        tracks = [t for t in stream.tracks if t.kind in self.kinds]
        if not tracks:
            raise MediaError(f"stream {stream.id} has no tracks to merge")
        for t in tracks:
            if any(o == t.origin for _, o in self._sources(t.kind)):
                raise DuplicateSourceError(f"{t.origin}/{t.kind} already in {self.merge_id}")
        for t in tracks:
            self._sources(t.kind).append((t.id, t.origin))
        self._commit(at)
        return self

    def remove(self, origin, at=0.0):
        before = len(self.video_sources) + len(self.audio_sources)
        self.video_sources = [s for s in self.video_sources if s[1] != origin]
        self.audio_sources = [s for s in self.audio_sources if s[1] != origin]
        if len(self.video_sources) + len(self.audio_sources) == before:
            log.warning("merge %s has no source from %s", self.merge_id, origin)
            return self
        self._commit(at)
        return self

    def _commit(self, at):
        n = len(self.video_sources) if VIDEO in self.kinds else len(self.audio_sources)
        self.layout = layout_for(n)
        for k in self.kinds:
            self.graph._merge_nodes[f"{self.merge_id}/{k}"].set(
                at, [tid for tid, _ in self._sources(k)]
            )

    def cell_of(self, origin):
        for i, (_, o) in enumerate(self.video_sources):
            if o == origin:
                return self.layout.cells[i]
        return None


class MediaGraph:
    """Registry of tracks and streams with time-indexed composition queries."""

    def __init__(self):
        self._nodes = {}
        self._merge_nodes = {}
        self.tracks = {}
        self.streams = {}
        self.merges = {}
        self._merge_seq = itertools.count(1)

    def _register_stream(self, stream):
        self.streams[stream.id] = stream
        for t in stream.tracks:
            self.tracks[t.id] = t
        return stream

    def local_stream(self, peer):
        sid = f"{peer}/local"
        if sid not in self.streams:
            tracks = [Track(f"{peer}/{k}", k, peer, synthetic_label=f"cam:{peer}") for k in KINDS]
            for t in tracks:
                self._nodes[t.id] = _LocalNode(peer)
            self._register_stream(MediaStream(sid, tracks, "local"))
        return self.streams[sid]

    def merge_create(self, owner, fps=15.0, kinds=KINDS):
        if not fps > 0:
            raise ValueError("merge fps must be positive")
        mid = f"{owner}/merge{next(self._merge_seq)}"
        m = MergedStream(self, mid, owner, fps, kinds)
        for t in m.out_stream.tracks:
            node = _MergeNode()
            self._nodes[t.id] = node
            self._merge_nodes[t.id] = node
        self._register_stream(m.out_stream)
        self.merges[mid] = m
        return m

    def add_remote(self, receiver, conn_id, source_tracks, latency_ms, connected_at):
        """Create the receiving end of ``source_tracks`` sent over a connection."""
        tracks = []
        for src in source_tracks:
            t = Track(f"{conn_id}>{receiver}:{src.id}", src.kind, src.origin, src.synthetic_label)
            self._nodes[t.id] = _RemoteNode(src.id, latency_ms, connected_at)
            tracks.append(t)
        sid = f"{conn_id}>{receiver}"
        n = sum(1 for s in self.streams if s == sid or s.startswith(sid + "."))
        if n:
            sid = f"{sid}.{n}"
        return self._register_stream(MediaStream(sid, tracks, "remote", conn_id))

    def close_remote(self, stream_id, at):
        for t in self.streams[stream_id].tracks:
            node = self._nodes[t.id]
            if node.closed_at is None:
                node.closed_at = at

    def track_origins(self, track_id, at):
        node = self._nodes.get(track_id)
        if node is None:
            raise KeyError(f"unknown track {track_id}")
        if isinstance(node, _LocalNode):
            return frozenset({node.origin})
        if isinstance(node, _MergeNode):
            out = set()
            for src in node.at(at):
                out |= self.track_origins(src, at)
            return frozenset(out)
        if at < node.connected_at or (node.closed_at is not None and at >= node.closed_at):
            return frozenset()
        return self.track_origins(node.source, at - node.latency_ms)

    def composition_of(self, stream_id, at):
        """Set of (origin, kind) carried by a stream at sim time ``at`` (ms)."""
        stream = self.streams.get(stream_id)
        if stream is None:
            raise KeyError(f"unknown stream {stream_id}")
        out = set()
        for t in stream.tracks:
            out |= {(o, t.kind) for o in self.track_origins(t.id, at)}
        return out


def merge_create(graph, owner, fps=15.0):
    return graph.merge_create(owner, fps)


def merge_add(m, stream, at=0.0):
    return m.add(stream, at)


def merge_remove(m, origin, at=0.0):
    return m.remove(origin, at)


def composition_of(graph, stream_id, at):
    return graph.composition_of(stream_id, at)
