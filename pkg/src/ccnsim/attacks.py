"""Adversary procedures, written as engine processes.

Every attack talks to the network only through an ordinary :class:`Host`:
it expresses interests and times the answers. Nothing here peeks at router
state. Generator functions are meant to be handed to ``engine.spawn``; the
process result holds the attack's outcome.
"""
from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import dataclass, field
from typing import Optional

from .engine import EventKind, Sleep, WaitUntil
from .names import EMPTY_EXCLUDE, Name, name as to_name
from .nodes import FixedName, Host, Periodic, Poisson, PoisonSpec, UniformNames, UniqueNames, workload
from .router import Interest, chunk_component

VARIANTS = ("Enumerate", "TimingSequential", "TimingParallel", "CloneConversation",
            "IFASameName", "IFADistinctNames", "IFANonexistent", "IFACollusion",
            "CachePollution", "ContentPoisoning")
IFA_VARIANTS = ("IFASameName", "IFADistinctNames", "IFANonexistent", "IFACollusion")


def param_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class AttackSpec:
    id: str
    variant: str
    nodes: list
    params: dict = field(default_factory=dict)
    start_us: int = 0
    stop_us: Optional[int] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}")


# -- cache enumeration ------------------------------------------------------

@dataclass
class EnumerationResult:
    names: list = field(default_factory=list)
    queries: int = 0
    blocked: bool = False
    arrivals: dict = field(default_factory=dict)


def enumerate_cache(host: Host, prefix, limit: int = 1000, timeout_us: int = 50_000):
    """List cached names under ``prefix`` by growing an exclude filter.

    Each round trip either reveals one new name or ends the walk. If the
    router ignores the exclude filter the same name comes back twice, which
    ends the walk and marks it blocked.
    """
    prefix = to_name(prefix)
    out = EnumerationResult()
    exclude = EMPTY_EXCLUDE
    while len(out.names) < limit:
        interest = Interest(prefix, exclude, host.nonce(), non_invasive=True)
        res = yield host.fetch(interest, timeout_us)
        out.queries += 1
        if res.outcome == "excluded":
            out.blocked = True
            break
        if not res.ok:
            break
        got = res.obj.name
        if got in exclude.excluded or got in out.arrivals:
            out.blocked = True
            break
        out.names.append(got)
        out.arrivals[got] = (res.received_at, res.obj.payload_size)
        exclude = exclude.with_name(got)
    return out


# -- RTT calibration and characteristic time --------------------------------

@dataclass
class RttCalibration:
    hit_rtt_samples: list
    miss_rtt_samples: list
    threshold: float

    @property
    def hit_mean(self) -> float:
        return statistics.fmean(self.hit_rtt_samples)

    @property
    def miss_mean(self) -> float:
        return statistics.fmean(self.miss_rtt_samples)

    @property
    def margin(self) -> float:
        """Gap between the slowest hit and fastest miss, relative to the mean gap."""
        spread = self.miss_mean - self.hit_mean
        if spread <= 0:
            return 0.0
        return max(0.0, (min(self.miss_rtt_samples) - max(self.hit_rtt_samples)) / spread)

    @property
    def reliable(self) -> bool:
        return max(self.hit_rtt_samples) < min(self.miss_rtt_samples)

    def is_hit(self, rtt_us) -> bool:
        return rtt_us is not None and rtt_us < self.threshold


def make_calibration(hits, misses) -> RttCalibration:
    if not hits or not misses:
        raise ValueError("calibration needs at least one hit and one miss sample")
    threshold = (statistics.fmean(hits) + statistics.fmean(misses)) / 2
    return RttCalibration(list(hits), list(misses), threshold)


def calibrate_rtt(host: Host, known_cached, uncached_prefix, n: int, timeout_us: int = 2_000_000):
    """Measure ``n`` hit RTTs on ``known_cached`` and ``n`` miss RTTs on fresh
    names under ``uncached_prefix`` (a miss caches its name, so each miss
    probe needs a name nobody asked for before)."""
    if n <= 0:
        raise ValueError("calibration needs n >= 1")
    return _calibrate(host, to_name(known_cached), to_name(uncached_prefix), n, timeout_us)


def _calibrate(host, cached, uncached_prefix, n, timeout_us):
    seed = yield host.fetch(cached, timeout_us)
    hits, misses = [], []
    for i in range(n):
        res = yield host.fetch(cached, timeout_us)
        if res.ok:
            hits.append(res.rtt_us)
        res = yield host.fetch(uncached_prefix.append(f"cal{host.id}-{i}"), timeout_us)
        if res.ok:
            misses.append(res.rtt_us)
    del seed
    return make_calibration(hits, misses)


@dataclass
class TcEstimate:
    estimates: list
    brackets: list
    trials: int
    tolerance: float = 0.1

    @property
    def mean(self) -> float:
        return statistics.fmean(self.estimates)

    @property
    def cv(self) -> float:
        if len(self.estimates) < 2:
            return 0.0
        return statistics.pstdev(self.estimates) / self.mean

    @property
    def reliable(self) -> bool:
        return self.cv <= self.tolerance

    @property
    def value(self) -> Optional[float]:
        """Point estimate in microseconds, or None when repeats disagree."""
        return self.mean if self.reliable else None

    @property
    def bracket_width(self) -> float:
        return max(self.brackets) if self.brackets else 0.0


def estimate_characteristic_time(host: Host, probe_prefix, threshold_us: float,
                                 initial_gap_us: int = 10_000, rel_tol: float = 0.02,
                                 max_gap_us: int = 600_000_000, repeats: int = 1,
                                 timeout_us: int = 2_000_000, tolerance: float = 0.1):
    """Find how long an item survives in the nearest cache while unused.

    Each trial fetches a never-requested name under ``probe_prefix`` (a
    guaranteed miss that seeds the cache), waits a gap, and fetches it again.
    Gaps grow geometrically until the re-fetch misses, then the hit/miss
    boundary is bisected. The returned value is the cache-side idle time,
    i.e. the gap plus one hit round trip.
    """
    probe_prefix = to_name(probe_prefix)
    counter = [0]
    hit_rtts = []
    trials = [0]

    def trial(gap):
        nm = probe_prefix.append(f"tc{host.id}-{counter[0]}")
        counter[0] += 1
        trials[0] += 1
        first = yield host.fetch(nm, timeout_us)
        if not first.ok:
            return None
        yield Sleep(gap)
        second = yield host.fetch(nm, timeout_us)
        hit = second.ok and second.rtt_us < threshold_us
        if hit:
            hit_rtts.append(second.rtt_us)
        return hit

    estimates, brackets = [], []
    for _ in range(repeats):
        lo, gap = 0, initial_gap_us
        while True:
            hit = yield from trial(gap)
            if hit is None:
                continue
            if not hit:
                break
            lo = gap
            gap *= 2
            if gap > max_gap_us:
                raise RuntimeError("no eviction observed below max_gap_us")
        hi = gap
        while hi - lo > rel_tol * hi:
            mid = (lo + hi) // 2
            hit = yield from trial(mid)
            if hit:
                lo = mid
            elif hit is not None:
                hi = mid
        rtt = statistics.fmean(hit_rtts) if hit_rtts else 0.0
        estimates.append((lo + hi) / 2 + rtt)
        brackets.append(hi - lo)
    return TcEstimate(estimates, brackets, trials[0], tolerance)


# -- timing probes ----------------------------------------------------------

@dataclass
class Detection:
    start: Optional[int]
    end: int
    confidence: float
    name: Optional[Name] = None

    def contains(self, t: int) -> bool:
        return (self.start is None or t > self.start) and t <= self.end


@dataclass
class TimingProbeState:
    target: Name
    t_c: int
    epsilon: int
    rtt_threshold: float
    confidence: float = 1.0
    chunk_cursor: int = 0
    detections: list = field(default_factory=list)
    probes: list = field(default_factory=list)
    ignore_first: bool = False

    def __post_init__(self):
        self.target = to_name(self.target)


def timing_probe_loop(host: Host, state: TimingProbeState, until: int, timeout_us: int = 2_000_000):
    """Re-request the target every t_c + epsilon after each answer.

    A hit at probe k means somebody else touched the target after probe k-1,
    because the attacker's own copy has aged out by then.
    """
    eng = host.engine
    prev = None
    first = True
    while eng.now < until:
        sent = eng.now
        res = yield host.fetch(state.target, timeout_us)
        hit = res.ok and res.rtt_us < state.rtt_threshold
        state.probes.append((sent, hit, res.rtt_us))
        if hit and not (first and state.ignore_first):
            state.detections.append(Detection(prev, sent, state.confidence, state.target))
        first = False
        prev = sent
        nxt = (res.received_at if res.received_at is not None else eng.now) + state.t_c + state.epsilon
        if nxt >= until:
            break
        yield WaitUntil(nxt)
    return state.detections


@dataclass
class ParallelProbeResult:
    states: list
    blocked: bool = False

    @property
    def detections(self) -> list:
        out = []
        for s in self.states:
            out.extend(s.detections)
        return sorted(out, key=lambda d: (d.end, str(d.name)))


def parallel_cache_probing(host: Host, target, total_chunks: int, t_c: int, epsilon: int,
                           rtt_threshold: float, until: int, confidence: float = 1.0,
                           timeout_us: int = 2_000_000):
    """Probe the chunks of ``target`` in staggered rotation.

    Each chunk keeps the sequential spacing, but the chunk schedules are
    offset by period/total_chunks so their blind spots do not overlap.
    Chunk 0 runs exactly the sequential schedule.
    """
    eng = host.engine
    target = to_name(target)
    period = t_c + epsilon
    states = []

    def chunk_state(i, ignore_first=False):
        st = TimingProbeState(target.append(chunk_component(i)), t_c, epsilon, rtt_threshold,
                              confidence, chunk_cursor=i, ignore_first=ignore_first)
        states.append(st)
        return st

    result = ParallelProbeResult(states)
    start = eng.now
    eng.spawn(timing_probe_loop(host, chunk_state(0), until, timeout_us), kind=EventKind.ATTACK_TICK,
              node=host.id, name="probe-chunk-0")
    if total_chunks <= 1:
        yield WaitUntil(until)
        return result

    # check whether the cache answers chunk-level requests at all
    test = target.append(chunk_component(total_chunks - 1))
    yield host.fetch(test, timeout_us)
    again = yield host.fetch(test, timeout_us)
    if not (again.ok and again.rtt_us < rtt_threshold):
        result.blocked = True
        yield WaitUntil(until)
        return result

    for i in range(1, total_chunks):
        at = start + (i * period) // total_chunks
        eng.spawn(timing_probe_loop(host, chunk_state(i, ignore_first=(i == total_chunks - 1)),
                                    until, timeout_us),
                  kind=EventKind.ATTACK_TICK, node=host.id, name=f"probe-chunk-{i}", at=max(at, eng.now))
    yield WaitUntil(until)
    return result


# -- conversation cloning ---------------------------------------------------

@dataclass
class CloneResult:
    fetched: list = field(default_factory=list)
    enumerated: int = 0
    blocked: bool = False


def clone_conversation(host: Host, prefix, until: int, limit: int = 1000,
                       timeout_us: int = 1_000_000, enum_timeout_us: int = 50_000):
    """Learn a call's sequence number from the cache, then pull what comes next.

    Returns (name, arrival time, payload size) tuples, the raw material for
    size/timing side channels.
    """
    eng = host.engine
    prefix = to_name(prefix)
    out = CloneResult()
    snap = yield from enumerate_cache(host, prefix, limit, enum_timeout_us)
    out.enumerated = len(snap.names)
    for nm in snap.names:
        at, size = snap.arrivals[nm]
        out.fetched.append((nm, at, size))
    seqs = {}
    for nm in snap.names:
        if len(nm) == len(prefix) + 1 and nm.last.isdigit():
            seqs[int(nm.last)] = nm
    if not seqs:
        out.blocked = bool(snap.names)
        return out
    top = max(seqs)
    for i in range(1, top):
        if i in seqs:
            continue
        res = yield host.fetch(prefix.append(str(i)), timeout_us)
        if res.ok:
            out.fetched.append((res.obj.name, res.received_at, res.obj.payload_size))
    nxt = top + 1
    while eng.now < until:
        res = yield host.fetch(prefix.append(str(nxt)), timeout_us)
        if res.ok:
            out.fetched.append((res.obj.name, res.received_at, res.obj.payload_size))
            nxt += 1
    out.fetched.sort(key=lambda t: t[1])
    return out


# -- flooding, pollution, poisoning -----------------------------------------

def ifa_flood(bots, variant: str, rate_per_s: float, prefix, start_us: int = 0,
              stop_us: Optional[int] = None, name=None, poisson: bool = False):
    """Start one flooding process per bot; returns the processes.

    ``rate_per_s`` is per bot. IFASameName floods ``name`` (default
    ``prefix/flood``); the other variants use a fresh name per interest
    under ``prefix``, which for IFANonexistent should be a prefix that no
    producer serves and for IFACollusion one served by a slow colluder.
    """
    if variant not in IFA_VARIANTS:
        raise ValueError(f"{variant} is not an interest flooding variant")
    prefix = to_name(prefix)
    procs = []
    for bot in bots:
        eng = bot.engine
        rng = eng.rng.stream(f"attack/ifa/{bot.id}")
        arrivals = Poisson(rate_per_s) if poisson else Periodic(1000.0 / rate_per_s)
        if variant == "IFASameName":
            names = FixedName(name or prefix.append("flood"))
        else:
            names = UniqueNames(prefix, tag=f"{bot.id}-")
        gen = workload(bot, arrivals, names, start_us, stop_us, rng=rng, tracked=False)
        procs.append(eng.spawn(gen, kind=EventKind.ATTACK_TICK, node=bot.id, name=f"ifa-{bot.id}"))
    return procs


def pollute_cache(bots, colluder_prefix, catalog_size: Optional[int], rate_per_s: float,
                  start_us: int = 0, stop_us: Optional[int] = None):
    """Bots request junk from a colluding producer at uniform popularity.

    ``catalog_size=None`` makes every junk name unique.
    """
    procs = []
    if rate_per_s <= 0:
        return procs
    for bot in bots:
        eng = bot.engine
        rng = eng.rng.stream(f"attack/pollute/{bot.id}")
        if catalog_size is None:
            names = UniqueNames(colluder_prefix, tag=f"junk-{bot.id}-")
        else:
            names = UniformNames(colluder_prefix, catalog_size, tag="junk")
        gen = workload(bot, Poisson(rate_per_s), names, start_us, stop_us, rng=rng, tracked=False)
        procs.append(eng.spawn(gen, kind=EventKind.ATTACK_TICK, node=bot.id, name=f"pollute-{bot.id}"))
    return procs


def poison_content(compromised_node, targets, mode: str = "forge") -> PoisonSpec:
    """Make a router on the return path substitute forged copies of ``targets``."""
    if isinstance(targets, (str, Name)):
        targets = [targets]
    spec = PoisonSpec(targets, mode)
    compromised_node.poison = spec
    # a compromised box has no reason to check its own forgeries
    compromised_node.router.config.verify_signatures = False
    return spec
