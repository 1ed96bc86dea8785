"""Edge-router detectors and network-level countermeasures.

Detectors are pure functions of a :class:`FaceStats` snapshot and a
:class:`DetectorConfig`. They return :class:`Flag` records; what to do about
a flag is decided separately by :func:`apply_response`.
"""
from __future__ import annotations

import statistics
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .names import Name

RESPONSES = ("ignore_for_caching", "drop_interests", "blacklist_producer")


@dataclass(frozen=True)
class Flag:
    detector: str
    face: Optional[int]
    time: int
    name: Optional[Name] = None
    names: tuple = ()
    value: float = 0.0


@dataclass
class DetectorConfig:
    window_us: int = 60_000_000
    periodic_min_repeats: int = 6
    periodic_cv_max: float = 0.2
    hit_rate_max: float = 0.8
    hit_rate_min_lookups: int = 20
    exclude_rate_max: float = 0.5
    exclude_min_count: int = 3
    pollution_min_faces: int = 2
    pollution_share_max: float = 0.25
    pollution_overlap_max: float = 0.2
    pollution_min_names: int = 50
    pollution_interval_us: int = 1_000_000
    enabled: tuple = ("periodic", "hit_rate", "exclude", "pollution")

    def __post_init__(self):
        if self.periodic_cv_max <= 0:
            raise ValueError("periodic_cv_max must be > 0")
        for attr in ("hit_rate_max", "exclude_rate_max", "pollution_share_max", "pollution_overlap_max"):
            v = getattr(self, attr)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{attr} must lie in [0, 1], got {v}")
        if self.pollution_min_names < 1:
            raise ValueError("pollution_min_names must be >= 1")
        if self.periodic_min_repeats < 3:
            raise ValueError("periodic_min_repeats must be >= 3")
        if self.window_us <= 0:
            raise ValueError("window_us must be positive")
        unknown = set(self.enabled) - {"periodic", "hit_rate", "exclude", "pollution"}
        if unknown:
            raise ValueError(f"unknown detectors {sorted(unknown)}")


class FaceStats:
    """Sliding-window request history kept by an edge router."""

    def __init__(self, window_us: int = 60_000_000, ring: int = 32):
        self.window_us = window_us
        self.ring = ring
        self.now = 0
        self.requests: dict = {}    # (face, name) -> deque of arrival times
        self.lookups: dict = {}     # face -> deque of (time, hit)
        self.interests: dict = {}   # face -> deque of (time, carries_exclude)
        self._last_sweep = 0

    def record_interest(self, face, name: Name, now: int, has_exclude: bool):
        self.now = now
        q = self.requests.get((face, name))
        if q is None:
            q = self.requests[(face, name)] = deque(maxlen=self.ring)
        q.append(now)
        self.interests.setdefault(face, deque()).append((now, has_exclude))
        self._maybe_sweep(now)

    def record_lookup(self, face, hit: bool, now: int):
        self.now = now
        self.lookups.setdefault(face, deque()).append((now, hit))

    def _maybe_sweep(self, now):
        if now - self._last_sweep < self.window_us:
            return
        self._last_sweep = now
        self.prune(now)

    def prune(self, now: int):
        horizon = now - self.window_us
        for key in [k for k, q in self.requests.items() if q[-1] <= horizon]:
            del self.requests[key]
        for table in (self.lookups, self.interests):
            for q in table.values():
                while q and q[0][0] <= horizon:
                    q.popleft()

    def _recent(self, seq, now=None):
        horizon = (self.now if now is None else now) - self.window_us
        return [x for x in seq if (x if isinstance(x, int) else x[0]) > horizon]

    def request_times(self, face, name):
        return self._recent(self.requests.get((face, name), ()))

    def lookup_window(self, face):
        return self._recent(self.lookups.get(face, ()))

    def interest_window(self, face):
        return self._recent(self.interests.get(face, ()))

    def shared_fraction(self) -> dict:
        """Per face: (share of its recently requested names some other face
        also requested, number of distinct names it requested)."""
        horizon = self.now - self.window_us
        faces_of: dict = {}
        names_of: dict = {}
        for (face, name), q in self.requests.items():
            if q and q[-1] > horizon:
                faces_of[name] = faces_of.get(name, 0) + 1
                names_of.setdefault(face, []).append(name)
        return {face: (sum(1 for nm in names if faces_of[nm] > 1) / len(names), len(names))
                for face, names in names_of.items()}


def coefficient_of_variation(times) -> Optional[float]:
    gaps = [b - a for a, b in zip(times, times[1:])]
    if len(gaps) < 2:
        return None
    mean = statistics.fmean(gaps)
    if mean <= 0:
        return 0.0
    return statistics.pstdev(gaps) / mean


def periodic_query_detector(stats: FaceStats, cfg: DetectorConfig, keys=None) -> list:
    flags = []
    for key in sorted(stats.requests if keys is None else keys):
        times = stats.request_times(*key)
        if len(times) < cfg.periodic_min_repeats:
            continue
        cv = coefficient_of_variation(times)
        if cv is not None and cv <= cfg.periodic_cv_max:
            flags.append(Flag("periodic", key[0], stats.now, name=key[1], value=cv))
    return flags


def hit_rate_detector(stats: FaceStats, cfg: DetectorConfig, faces=None) -> list:
    flags = []
    for face in sorted(stats.lookups if faces is None else faces):
        window = stats.lookup_window(face)
        if len(window) < cfg.hit_rate_min_lookups:
            continue
        rate = sum(1 for _, hit in window if hit) / len(window)
        if rate > cfg.hit_rate_max:
            flags.append(Flag("hit_rate", face, stats.now, value=rate))
    return flags


def exclude_usage_detector(stats: FaceStats, cfg: DetectorConfig, faces=None) -> list:
    flags = []
    for face in sorted(stats.interests if faces is None else faces):
        window = stats.interest_window(face)
        used = sum(1 for _, ex in window if ex)
        if used < cfg.exclude_min_count:
            continue
        rate = used / len(window)
        if rate > cfg.exclude_rate_max:
            flags.append(Flag("exclude", face, stats.now, value=rate))
    return flags


def pollution_detector(router, cfg: DetectorConfig, now: Optional[int] = None) -> tuple:
    """Find faces whose content hogs the cache while nobody else wants it.

    A cached name is *narrow* when fewer than ``pollution_min_faces``
    distinct faces asked for it. A face is flagged when the narrow names it
    requested take more than ``pollution_share_max`` of capacity and at most
    ``pollution_overlap_max`` of the names it asked for recently were also
    asked for by some other face. Faces that asked for fewer than
    ``pollution_min_names`` distinct names are not judged yet.
    Returns ``(flags, faces, names)``.
    """
    cs = router.cs
    if not cs.entries or cs.capacity <= 0:
        return [], [], []
    narrow_by_face: dict = {}
    for nm, entry in cs.entries.items():
        if len(entry.requesters) >= cfg.pollution_min_faces:
            continue
        for face in entry.requesters:
            narrow_by_face.setdefault(face, []).append(nm)
    stats = getattr(router, "stats", None)
    if stats is not None and now is not None:
        stats.now = max(stats.now, now)
    overlap = stats.shared_fraction() if stats is not None else {}
    flags, faces, names = [], [], []
    t = cs.now if now is None else now
    for face in sorted(narrow_by_face):
        share = len(narrow_by_face[face]) / cs.capacity
        shared, seen = overlap.get(face, (0.0, 0))
        if share <= cfg.pollution_share_max or shared > cfg.pollution_overlap_max:
            continue
        if stats is not None and seen < cfg.pollution_min_names:
            continue
        owned = tuple(sorted(narrow_by_face[face]))
        faces.append(face)
        names.extend(owned)
        flags.append(Flag("pollution", face, t, names=owned, value=share))
    return flags, faces, sorted(set(names))


def apply_response(router, flag: Flag, policy: str):
    if policy == "ignore_for_caching":
        router.ignored_faces.add(flag.face)
    elif policy == "drop_interests":
        router.blocked_faces.add(flag.face)
    elif policy == "blacklist_producer":
        keys = set()
        for nm in flag.names or ((flag.name,) if flag.name else ()):
            entry = router.cs.entries.get(nm)
            if entry is not None:
                keys.add(entry.obj.signature.key_id)
        router.cs.blocked_keys.update(keys)
        for nm in [n for n, e in router.cs.entries.items() if e.obj.signature.key_id in keys]:
            router.cs.remove(nm, reason="blacklisted")
    else:
        raise ValueError(f"unknown response policy {policy!r}")


@dataclass
class BlacklistReport:
    names: tuple
    messages: int = 0
    delivered: int = 0
    removals: dict = field(default_factory=dict)

    @property
    def removed(self) -> int:
        return sum(self.removals.values())


def broadcast_blacklist(engine, names, origin: Optional[str] = None) -> BlacklistReport:
    """Ship a name blacklist to every router along shortest-delay paths.

    One message per router is charged; each router purges the listed names
    when its copy arrives. The report fills in as deliveries happen.
    """
    from .router import apply_blacklist

    names = tuple(names)
    routers = engine.router_ids()
    report = BlacklistReport(names)
    if not routers:
        return report
    origin = origin or routers[0]
    delays = engine.path_delays(origin)

    def arrive(rid):
        node = engine.nodes[rid]
        removed = apply_blacklist(node.router.cs, names, engine.now)
        report.removals[rid] = removed
        report.delivered += 1
        node.router.counters["blacklist_messages"] += 1
        engine.record(rid, "blacklist", None, None, f"removed={removed}")

    for rid in routers:
        report.messages += 1
        engine.call_at(engine.now + delays.get(rid, 0), arrive, rid, node=rid)
    return report
