"""CCN forwarding node: Content Store, PIT, FIB and the interest/data pipeline.

The :class:`Router` is a pure state machine. Its handlers take a message, the
arrival face and the current simulated time and return a list of actions;
the engine is responsible for turning those into link deliveries.
"""
from __future__ import annotations

import heapq
import random
from bisect import bisect_left, insort
from collections import Counter, OrderedDict
from dataclasses import dataclass
from typing import Optional

from . import defenses
from .crypto import KeyRegistry, Signature, Verdict, verify
from .names import EMPTY_EXCLUDE, ExcludeFilter, Name, is_prefix

CHUNK_PREFIX = "seg="
POLICIES = ("FIFO", "LRU", "RANDOM", "POPULARITY")


def chunk_component(index: int) -> str:
    return f"{CHUNK_PREFIX}{index}"


def chunk_index_of(nm: Name) -> Optional[int]:
    last = nm.last
    if last is not None and last.startswith(CHUNK_PREFIX):
        tail = last[len(CHUNK_PREFIX):]
        if tail.isdigit():
            return int(tail)
    return None


# -- messages ---------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Interest:
    # No consumer identifier on purpose: only the PIT of the first hop
    # knows which face asked.
    name: Name
    exclude: ExcludeFilter = EMPTY_EXCLUDE
    nonce: bytes = b"\x00" * 8
    non_invasive: bool = False
    no_cache_request: bool = False


@dataclass(frozen=True, slots=True)
class ContentObject:
    name: Name
    payload: bytes
    signature: Signature
    no_cache: bool = False
    chunk_index: Optional[int] = None
    total_chunks: Optional[int] = None

    @property
    def payload_size(self) -> int:
        return len(self.payload)


# -- actions ----------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ForwardInterest:
    face: int
    interest: Interest


@dataclass(frozen=True, slots=True)
class SendData:
    face: int
    obj: ContentObject
    delay_us: int = 0
    from_cache: bool = False


@dataclass(frozen=True, slots=True)
class Drop:
    reason: str
    name: Name


@dataclass(frozen=True, slots=True)
class CacheInsert:
    name: Name
    no_cache: bool


@dataclass(frozen=True, slots=True)
class CacheEvict:
    name: Name
    reason: str


@dataclass(frozen=True, slots=True)
class RaiseFlag:
    flag: defenses.Flag


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class LifetimeDist:
    """Cache entry lifetime in microseconds: fixed, uniform or exponential."""

    kind: str = "fixed"
    a: int = 0
    b: int = 0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "exponential"):
            raise ValueError(f"unknown lifetime distribution {self.kind!r}")
        if self.a < 0 or (self.kind == "uniform" and self.b < self.a):
            raise ValueError("invalid lifetime bounds")

    def sample(self, rng) -> int:
        if self.kind == "fixed":
            return self.a
        if self.kind == "uniform":
            return self.a + int(rng.random() * (self.b - self.a))
        return int(rng.expovariate(1.0 / self.a)) if self.a else 0


@dataclass
class RouterConfig:
    cs_capacity: int = 100
    cs_policy: str = "LRU"
    lifetime: Optional[LifetimeDist] = None
    popularity_k: int = 2
    popularity_window_us: int = 10_000_000
    verify_signatures: bool = False
    verify_cost_us: int = 50
    honor_no_cache: bool = True
    allow_non_invasive: bool = True
    allow_exclude: bool = True
    allow_chunk_requests: bool = True
    hit_delay_min_us: int = 0
    hit_delay_jitter_us: int = 0
    per_domain_limit: Optional[float] = None
    per_domain_burst: Optional[float] = None
    pit_capacity: Optional[int] = 100_000
    pit_timeout_us: int = 4_000_000
    detectors: Optional[defenses.DetectorConfig] = None
    response: Optional[str] = None
    block_signers: frozenset = frozenset()

    def __post_init__(self):
        if self.cs_policy not in POLICIES:
            raise ValueError(f"cs_policy must be one of {POLICIES}")
        if self.cs_capacity < 0:
            raise ValueError("cs_capacity must be >= 0")
        if self.pit_capacity is not None and self.pit_capacity < 1:
            raise ValueError("pit_capacity must be >= 1")
        if self.popularity_k < 1:
            raise ValueError("popularity_k must be >= 1")
        if self.response is not None and self.response not in defenses.RESPONSES:
            raise ValueError(f"response must be one of {defenses.RESPONSES}")
        if self.per_domain_limit is not None and self.per_domain_limit <= 0:
            raise ValueError("per_domain_limit must be positive")


# -- content store ----------------------------------------------------------

class CsEntry:
    __slots__ = ("obj", "insert_time", "last_access", "lifetime", "hit_count",
                 "request_count", "requesters", "expiry")

    def __init__(self, obj, now, lifetime, request_count):
        self.obj = obj
        self.insert_time = now
        self.last_access = now
        self.lifetime = lifetime
        self.hit_count = 0
        self.request_count = request_count
        self.requesters: dict = {}
        self.expiry = None if lifetime is None else now + lifetime


@dataclass
class Eviction:
    time: int
    name: Name
    reason: str
    residency: int
    idle: int


class ContentStore:
    """Bounded cache keyed by full name.

    Lifetimes count from insertion, except under LRU where they count from
    the last access: an LRU entry lives for ``lifetime`` while not queried.
    """

    def __init__(self, capacity=100, policy="LRU", lifetime: Optional[LifetimeDist] = None,
                 popularity_k=2, popularity_window_us=10_000_000):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.lifetime_dist = lifetime
        self.popularity_k = popularity_k
        self.popularity_window_us = popularity_window_us
        self.entries: OrderedDict = OrderedDict()
        self._sorted: list = []
        self._expiry_heap: list = []
        self._popularity: dict = {}
        self._pop_sweep = 0
        self.allow_non_invasive = True
        self.allow_exclude = True
        self.allow_chunk_requests = True
        self.honor_no_cache = True
        self.blocked_keys: set = set()
        self.now = 0
        self.exclude_ignored = 0
        self.evictions: list = []

    def __len__(self):
        return len(self.entries)

    def __contains__(self, nm):
        return nm in self.entries

    def names(self) -> list:
        return list(self._sorted)

    # popularity bookkeeping

    def note_request(self, nm: Name, now: int):
        q = self._popularity.get(nm)
        if q is None:
            q = self._popularity[nm] = []
        q.append(now)
        if now - self._pop_sweep >= self.popularity_window_us:
            self._pop_sweep = now
            horizon = now - self.popularity_window_us
            for key in [k for k, v in self._popularity.items() if v[-1] <= horizon]:
                del self._popularity[key]

    def request_count(self, nm: Name, now: int) -> int:
        q = self._popularity.get(nm)
        if not q:
            return 0
        horizon = now - self.popularity_window_us
        return sum(1 for t in q if t > horizon)

    # expiry

    def _expired(self, entry: CsEntry, now: int) -> bool:
        return entry.expiry is not None and now > entry.expiry

    def purge_expired(self, now: int) -> list:
        removed = []
        heap = self._expiry_heap
        while heap and heap[0][0] < now:
            expiry, nm = heapq.heappop(heap)
            entry = self.entries.get(nm)
            if entry is not None and entry.expiry == expiry:
                self._drop(nm, expiry, "expired")
                removed.append(nm)
        return removed

    def _drop(self, nm: Name, when: int, reason: str):
        entry = self.entries.pop(nm)
        del self._sorted[bisect_left(self._sorted, nm)]
        self.evictions.append(Eviction(when, nm, reason, when - entry.insert_time,
                                       when - entry.last_access))
        return entry

    def remove(self, nm: Name, reason: str = "removed") -> bool:
        if nm not in self.entries:
            return False
        self._drop(nm, self.now, reason)
        return True

    def _touch(self, nm: Name, entry: CsEntry, now: int):
        entry.last_access = now
        if self.policy == "LRU":
            self.entries.move_to_end(nm)
            if entry.lifetime is not None:
                entry.expiry = now + entry.lifetime
                heapq.heappush(self._expiry_heap, (entry.expiry, nm))

    def _schedule_expiry(self, nm, entry):
        if entry.expiry is not None:
            heapq.heappush(self._expiry_heap, (entry.expiry, nm))


def cs_lookup(cs: ContentStore, interest: Interest, now: int, face=None) -> Optional[ContentObject]:
    cs.now = now
    if interest.no_cache_request or cs.capacity == 0:
        return None
    nm = interest.name
    exclude = interest.exclude
    if exclude and not cs.allow_exclude:
        cs.exclude_ignored += 1
        exclude = EMPTY_EXCLUDE
    if not cs.allow_chunk_requests:
        idx = chunk_index_of(nm)
        if idx is not None and idx > 0:
            return None
    cs.purge_expired(now)
    found = None
    entry = cs.entries.get(nm)
    if entry is not None and nm not in exclude.excluded:
        found = nm
    else:
        ordered = cs._sorted
        i = bisect_left(ordered, nm)
        while i < len(ordered):
            cand = ordered[i]
            if not is_prefix(nm, cand):
                break
            if cand not in exclude.excluded:
                if cs.allow_chunk_requests or not chunk_index_of(cand):
                    found = cand
                    break
            i += 1
    if found is None:
        return None
    entry = cs.entries[found]
    if cs._expired(entry, now):
        cs._drop(found, entry.expiry, "expired")
        return cs_lookup(cs, interest, now, face)
    if not (interest.non_invasive and cs.allow_non_invasive):
        entry.hit_count += 1
        entry.request_count += 1
        if face is not None:
            entry.requesters[face] = entry.requesters.get(face, 0) + 1
        cs._touch(found, entry, now)
    return entry.obj


def cs_insert(cs: ContentStore, obj: ContentObject, now: int, rng=None, requesters=()) -> Optional[list]:
    """Cache ``obj``. Returns the evicted names, or None when not cached."""
    cs.now = now
    if cs.capacity == 0:
        return None
    if cs.honor_no_cache and obj.no_cache:
        return None
    if obj.signature.key_id in cs.blocked_keys:
        return None
    requests = cs.request_count(obj.name, now)
    if cs.policy == "POPULARITY" and requests < cs.popularity_k:
        return None
    rng = rng or random.Random(0)
    evicted = []
    if obj.name in cs.entries:
        cs._drop(obj.name, now, "replaced")
    if len(cs.entries) >= cs.capacity:
        evicted.extend(cs.purge_expired(now))
    while len(cs.entries) >= cs.capacity:
        victim = _pick_victim(cs, rng)
        cs._drop(victim, now, "capacity")
        evicted.append(victim)
    lifetime = cs.lifetime_dist.sample(rng) if cs.lifetime_dist is not None else None
    entry = CsEntry(obj, now, lifetime, max(requests, 1))
    for face in requesters:
        entry.requesters[face] = 1
    cs.entries[obj.name] = entry
    insort(cs._sorted, obj.name)
    cs._schedule_expiry(obj.name, entry)
    return evicted


def _pick_victim(cs: ContentStore, rng) -> Name:
    if cs.policy in ("FIFO", "LRU"):
        return next(iter(cs.entries))
    if cs.policy == "RANDOM":
        return cs._sorted[rng.randrange(len(cs._sorted))]
    best, best_count = None, None
    for nm, entry in cs.entries.items():
        if best_count is None or entry.request_count < best_count:
            best, best_count = nm, entry.request_count
    return best


def cs_remove(cs: ContentStore, nm: Name) -> bool:
    return cs.remove(nm, "removed")


def apply_blacklist(cs: ContentStore, names, now: Optional[int] = None) -> int:
    if now is not None:
        cs.now = now
    return sum(1 for nm in names if cs.remove(nm, "blacklisted"))


def revalidate(cs: ContentStore, now: int, is_fresh) -> int:
    """Drop every entry the producer-side oracle ``is_fresh(obj, now)`` rejects."""
    cs.now = now
    stale = [nm for nm, e in cs.entries.items() if not is_fresh(e.obj, now)]
    for nm in stale:
        cs.remove(nm, "stale")
    return len(stale)


# -- PIT and FIB ------------------------------------------------------------

class PitEntry:
    __slots__ = ("name", "faces", "nonces", "expiry", "no_cache")

    def __init__(self, nm, expiry):
        self.name = nm
        self.faces: dict = {}
        self.nonces: set = set()
        self.expiry = expiry
        self.no_cache = False


class Pit:
    """Exact-name pending interest table with time-weighted occupancy."""

    def __init__(self, capacity: Optional[int] = 100_000, timeout_us: int = 4_000_000):
        self.capacity = capacity
        self.timeout_us = timeout_us
        self.entries: dict = {}
        self._heap: list = []
        self.peak = 0
        self._area = 0
        self._last_change = 0
        self._start = None
        self.expired_total = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, nm):
        return nm in self.entries

    def get(self, nm) -> Optional[PitEntry]:
        return self.entries.get(nm)

    def full(self) -> bool:
        return self.capacity is not None and len(self.entries) >= self.capacity

    def _account(self, t: int):
        if self._start is None:
            self._start = t
        self._area += len(self.entries) * (t - self._last_change)
        self._last_change = t

    def create(self, nm: Name, now: int) -> PitEntry:
        self._account(now)
        entry = PitEntry(nm, now + self.timeout_us)
        self.entries[nm] = entry
        heapq.heappush(self._heap, (entry.expiry, nm))
        self.peak = max(self.peak, len(self.entries))
        return entry

    def remove(self, nm: Name, now: int) -> Optional[PitEntry]:
        self._account(now)
        return self.entries.pop(nm, None)

    def expire(self, now: int) -> int:
        count = 0
        heap = self._heap
        while heap and heap[0][0] < now:
            expiry, nm = heapq.heappop(heap)
            entry = self.entries.get(nm)
            if entry is not None and entry.expiry == expiry:
                self._account(expiry)
                del self.entries[nm]
                count += 1
        self.expired_total += count
        return count

    def mean_occupancy(self, now: int) -> Optional[float]:
        if self._start is None or now <= self._start:
            return None
        area = self._area + len(self.entries) * (now - self._last_change)
        return area / (now - self._start)


def pit_expire(router: "Router", now: int) -> int:
    return router.pit.expire(now)


class Fib:
    def __init__(self):
        self.routes: dict = {}

    def add(self, prefix: Name, face: int):
        faces = self.routes.setdefault(prefix, [])
        if face not in faces:
            faces.append(face)
            faces.sort()

    def __iter__(self):
        for prefix, faces in self.routes.items():
            for f in faces:
                yield prefix, f


def fib_lookup(fib: Fib, nm: Name) -> Optional[int]:
    comps = nm.components
    for i in range(len(comps), -1, -1):
        faces = fib.routes.get(Name(comps[:i]))
        if faces:
            return faces[0]
    return None


class TokenBucket:
    """Per-domain interest limiter keyed on the first name component."""

    def __init__(self, rate_per_s: float, burst: Optional[float] = None):
        self.rate = rate_per_s / 1e6
        self.burst = max(1.0, burst if burst is not None else rate_per_s)
        self.buckets: dict = {}

    def allow(self, key: str, now: int) -> bool:
        tokens, last = self.buckets.get(key, (self.burst, now))
        tokens = min(self.burst, tokens + (now - last) * self.rate)
        if tokens >= 1.0:
            self.buckets[key] = (tokens - 1.0, now)
            return True
        self.buckets[key] = (tokens, now)
        return False


# -- the router -------------------------------------------------------------

class Router:
    def __init__(self, node_id: str, config: Optional[RouterConfig] = None,
                 registry: Optional[KeyRegistry] = None):
        self.id = node_id
        self.config = cfg = config or RouterConfig()
        self.registry = registry or KeyRegistry()
        self.cs = ContentStore(cfg.cs_capacity, cfg.cs_policy, cfg.lifetime,
                               cfg.popularity_k, cfg.popularity_window_us)
        self.cs.allow_non_invasive = cfg.allow_non_invasive
        self.cs.allow_exclude = cfg.allow_exclude
        self.cs.allow_chunk_requests = cfg.allow_chunk_requests
        self.cs.honor_no_cache = cfg.honor_no_cache
        self.pit = Pit(cfg.pit_capacity, cfg.pit_timeout_us)
        self.fib = Fib()
        self.limiter = TokenBucket(cfg.per_domain_limit, cfg.per_domain_burst) if cfg.per_domain_limit else None
        self.stats = defenses.FaceStats(cfg.detectors.window_us) if cfg.detectors else None
        self.counters: Counter = Counter()
        self.face_counters: dict = {}
        self.ignored_faces: set = set()
        self.blocked_faces: set = set()
        self.raised: set = set()
        self.flags: list = []
        self.last_cost_us = 0
        # used only when a caller drives the router without its own stream
        self.fallback_rng = random.Random(node_id)

    def _face(self, face):
        c = self.face_counters.get(face)
        if c is None:
            c = self.face_counters[face] = Counter()
        return c

    def _drop(self, reason, nm, face=None):
        self.counters["drop:" + reason] += 1
        if face is not None:
            self._face(face)["drop:" + reason] += 1
        return [Drop(reason, nm)]

    def on_interest(self, interest: Interest, in_face: int, now: int, rng=None) -> list:
        self.last_cost_us = 0
        self.pit.expire(now)
        self.counters["interests"] += 1
        fc = self._face(in_face)
        fc["interests"] += 1
        nm = interest.name

        if in_face in self.blocked_faces:
            return self._drop("blocked_face", nm, in_face)
        if self.limiter is not None and not self.limiter.allow(nm.first, now):
            return self._drop("rate_limit", nm, in_face)
        entry = self.pit.get(nm)
        if entry is not None and interest.nonce in entry.nonces:
            return self._drop("duplicate_nonce", nm, in_face)

        actions = []
        if self.stats is not None:
            self.stats.record_interest(in_face, nm, now, bool(interest.exclude))
        if self.cs.policy == "POPULARITY" and in_face not in self.ignored_faces:
            self.cs.note_request(nm, now)

        obj = cs_lookup(self.cs, interest, now, in_face)
        hit = obj is not None
        self.counters["cs_lookups"] += 1
        fc["cs_lookups"] += 1
        if self.stats is not None:
            self.stats.record_lookup(in_face, hit, now)
            actions.extend(self._detect(in_face, nm, now))
        if hit:
            self.counters["cs_hits"] += 1
            fc["cs_hits"] += 1
            cfg = self.config
            delay = cfg.hit_delay_min_us
            if cfg.hit_delay_jitter_us:
                delay += int((rng or self.fallback_rng).random() * cfg.hit_delay_jitter_us)
            actions.append(SendData(in_face, obj, delay, from_cache=True))
            return actions
        if interest.non_invasive and self.cs.allow_non_invasive:
            # cache-only query: never leaves this router
            return actions + self._drop("non_invasive_miss", nm, in_face)

        if entry is not None:
            entry.faces[in_face] = True
            entry.nonces.add(interest.nonce)
            entry.no_cache |= interest.no_cache_request
            self.counters["aggregated"] += 1
            return actions
        if self.pit.full():
            return actions + self._drop("pit_overflow", nm, in_face)
        out = fib_lookup(self.fib, nm)
        if out is None or out == in_face:
            return actions + self._drop("no_route", nm, in_face)
        entry = self.pit.create(nm, now)
        entry.faces[in_face] = True
        entry.nonces.add(interest.nonce)
        entry.no_cache = interest.no_cache_request
        self.counters["forwarded"] += 1
        actions.append(ForwardInterest(out, interest))
        return actions

    def on_data(self, obj: ContentObject, in_face: int, now: int, rng=None) -> list:
        self.last_cost_us = 0
        self.pit.expire(now)
        self.counters["data_in"] += 1
        nm = obj.name
        entry = self.pit.get(nm)
        if entry is None:
            return self._drop("unsolicited", nm)
        if obj.signature.key_id in self.config.block_signers:
            return self._drop("censored", nm)
        if self.config.verify_signatures:
            self.counters["verifications"] += 1
            self.last_cost_us += self.config.verify_cost_us
            if verify(self.registry, nm, obj.payload, obj.signature) is not Verdict.VALID:
                self.counters["poison_block"] += 1
                return self._drop("poison_block", nm)
        self.pit.remove(nm, now)
        actions: list = [SendData(face, obj) for face in entry.faces]
        self.counters["data_sent"] += len(entry.faces)
        requesters = [f for f in entry.faces if f not in self.ignored_faces]
        if not requesters:
            self.counters["cache_skip_ignored"] += 1
            return actions
        if entry.no_cache and self.config.honor_no_cache:
            return actions
        evicted = cs_insert(self.cs, obj, now, rng or self.fallback_rng, requesters)
        if evicted is not None:
            self.counters["cached"] += 1
            actions.append(CacheInsert(nm, obj.no_cache))
            for victim in evicted:
                self.counters["evicted"] += 1
                actions.append(CacheEvict(victim, "capacity"))
        return actions

    def _detect(self, face, nm, now) -> list:
        cfg = self.config.detectors
        found = []
        if "periodic" in cfg.enabled:
            found += defenses.periodic_query_detector(self.stats, cfg, keys=[(face, nm)])
        if "hit_rate" in cfg.enabled:
            found += defenses.hit_rate_detector(self.stats, cfg, faces=[face])
        if "exclude" in cfg.enabled:
            found += defenses.exclude_usage_detector(self.stats, cfg, faces=[face])
        return self.raise_flags(found)

    def run_pollution_detector(self, now: int) -> list:
        cfg = self.config.detectors
        if cfg is None or "pollution" not in cfg.enabled:
            return []
        flags, _, _ = defenses.pollution_detector(self, cfg, now)
        return self.raise_flags(flags)

    def raise_flags(self, flags) -> list:
        out = []
        for flag in flags:
            key = (flag.detector, flag.face, flag.name)
            if key in self.raised:
                continue
            self.raised.add(key)
            self.flags.append(flag)
            self.counters["flag:" + flag.detector] += 1
            if self.config.response:
                defenses.apply_response(self, flag, self.config.response)
            out.append(RaiseFlag(flag))
        return out


def check_invariants(router: Router, now: int):
    """Raise AssertionError if the cache or PIT breaks its bounds."""
    cs = router.cs
    if len(cs.entries) > cs.capacity:
        raise AssertionError(f"{router.id}: cache holds {len(cs.entries)} > capacity {cs.capacity}")
    if len(cs._sorted) != len(cs.entries):
        raise AssertionError(f"{router.id}: cache index out of sync")
    if router.pit.capacity is not None and len(router.pit) > router.pit.capacity:
        raise AssertionError(f"{router.id}: PIT over capacity")
    if router.config.honor_no_cache:
        for nm, entry in cs.entries.items():
            if entry.obj.no_cache:
                raise AssertionError(f"{router.id}: no_cache object {nm} cached")
