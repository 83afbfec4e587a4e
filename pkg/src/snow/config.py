"""Scenario configuration loaded from JSON.

Validation errors name the offending field, e.g. ``peers[2].link.loss_prob``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

from .media import MediaConfig
from .metrics import Thresholds
from .simnet import LinkModel, PeerProfile, RelayNode
from .topologies import TopologyModel


class ConfigError(ValueError):
    def __init__(self, path, detail):
        super().__init__(f"{path or '<root>'}: {detail}")
        self.path = path
        self.detail = detail


@dataclass
class PeerConfig:
    peer: str
    cpu_capacity: float
    link: LinkModel
    nat: str = "open"

    def profile(self):
        return PeerProfile(self.peer, self.link, self.cpu_capacity, self.nat)


@dataclass
class Roster:
    initiator: str
    others: list
    constrained: str | None = None


@dataclass
class Durations:
    warmup_s: float = 10.0
    measure_s: float = 30.0

    @property
    def total_s(self):
        return self.warmup_s + self.measure_s


@dataclass
class ScenarioConfig:
    name: str
    peers: list
    roster: Roster
    models: list = field(default_factory=lambda: [m.value for m in TopologyModel])
    relay: RelayNode | None = None
    durations: Durations = field(default_factory=Durations)
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    media: MediaConfig = field(default_factory=MediaConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)

    def profiles(self):
        return [p.profile() for p in self.peers]

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        """Short hash of the canonical JSON form; names every artifact."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object for {cls.__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}".lstrip("."), "unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"{path}.{name}".lstrip("."), "missing required field")
            continue
        kwargs[name] = data[name]
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


def _number(v, path, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, "expected a number")
    if positive and v <= 0:
        raise ConfigError(path, "must be positive")
    return v


def from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("", "config must be a JSON object")
    d = dict(d)
    peers = []
    for i, p in enumerate(d.get("peers") or []):
        path = f"peers[{i}]"
        if not isinstance(p, dict):
            raise ConfigError(path, "expected an object")
        p = dict(p)
        _number(p.get("cpu_capacity"), f"{path}.cpu_capacity", positive=True)
        p["link"] = _build(LinkModel, p.get("link"), f"{path}.link")
        peers.append(_build(PeerConfig, p, path))
    if not peers:
        raise ConfigError("peers", "at least one peer is required")
    names = [p.peer for p in peers]
    if len(set(names)) != len(names):
        raise ConfigError("peers", "peer names must be unique")
    d["peers"] = peers
    if "roster" not in d:
        raise ConfigError("roster", "missing required field")
    roster = d["roster"] = _build(Roster, d["roster"], "roster")
    for i, name in enumerate([roster.initiator] + list(roster.others) + [roster.constrained]):
        if name is not None and name not in names:
            raise ConfigError(f"roster", f"{name!r} has no peer profile")
    if d.get("relay") is not None:
        r = dict(d["relay"])
        r["link"] = _build(LinkModel, r.get("link"), "relay.link")
        d["relay"] = _build(RelayNode, r, "relay")
    if "durations" in d:
        dur = d["durations"] = _build(Durations, d["durations"], "durations")
        _number(dur.warmup_s, "durations.warmup_s")
        _number(dur.measure_s, "durations.measure_s", positive=True)
    if "media" in d:
        d["media"] = _build(MediaConfig, d["media"], "media")
    if "thresholds" in d:
        d["thresholds"] = _build(Thresholds, d["thresholds"], "thresholds")
    models = d.get("models", [m.value for m in TopologyModel])
    n = 1 + len(roster.others)
    for i, m in enumerate(models):
        try:
            model = TopologyModel(m)
        except ValueError:
            raise ConfigError(f"models[{i}]", f"unknown model {m!r}") from None
        if not model.accepts(n):
            raise ConfigError(f"models[{i}]", f"{model.value} cannot host {n} parties")
    seeds = d.get("seeds", [1, 2, 3, 4, 5])
    for i, s in enumerate(seeds):
        if isinstance(s, bool) or not isinstance(s, int):
            raise ConfigError(f"seeds[{i}]", "seeds must be integers")
    return _build(ScenarioConfig, d, "")


def load(path):
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON at line {e.lineno}: {e.msg}") from None
    except OSError as e:
        raise ConfigError("", f"cannot read {path}: {e.strerror}") from None
    return from_dict(data)


def reference_path():
    return resources.files("snow").joinpath("data/reference-3party.json")


def reference():
    return from_dict(json.loads(reference_path().read_text()))
