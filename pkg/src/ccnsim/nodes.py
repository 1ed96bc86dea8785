"""Node behaviors wired into the engine: routers, hosts, producers, workloads."""
from __future__ import annotations

import bisect
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional

from .crypto import KeyId, Signature, Verdict, ephemeral_key, sign, verify
from .engine import EventKind, WaitUntil
from .names import EMPTY_EXCLUDE, Name, is_prefix, name as to_name
from .router import (CacheEvict, CacheInsert, ContentObject, Drop, ForwardInterest, Interest,
                     RaiseFlag, Router, RouterConfig, SendData, chunk_component, chunk_index_of)


class Node:
    is_router = False

    def __init__(self, node_id: str):
        self.id = node_id
        self.engine = None
        self.faces: dict = {}
        self._face_seq = 0

    def next_face(self) -> int:
        f = self._face_seq
        self._face_seq += 1
        return f

    def attach(self, engine):
        pass

    def receive(self, msg, face: int):
        if isinstance(msg, Interest):
            self.receive_interest(msg, face)
        else:
            self.receive_data(msg, face)

    def receive_interest(self, interest: Interest, face: int):
        self.engine.record(self.id, "interest", interest.name, face, "ignored")

    def receive_data(self, obj: ContentObject, face: int):
        self.engine.record(self.id, "data", obj.name, face, "ignored")


# -- routers ----------------------------------------------------------------

class PoisonSpec:
    """Makes a compromised router swap matching data for a forged copy."""

    def __init__(self, targets, mode="forge"):
        self.targets = [to_name(t) for t in targets]
        self.mode = mode
        self.substituted = 0

    def matches(self, nm: Name) -> bool:
        return any(is_prefix(t, nm) for t in self.targets)

    def forge(self, obj: ContentObject, rng) -> ContentObject:
        self.substituted += 1
        payload = b"POISON" + obj.payload[6:]
        if self.mode == "tamper":
            sig = obj.signature
        else:
            sig = Signature(KeyId(rng.randbytes(8)), rng.randbytes(32))
        return ContentObject(obj.name, payload, sig, obj.no_cache, obj.chunk_index, obj.total_chunks)


class RouterNode(Node):
    is_router = True

    def __init__(self, node_id: str, config: Optional[RouterConfig] = None):
        super().__init__(node_id)
        self.config = config or RouterConfig()
        self.router: Optional[Router] = None
        self.busy_until = 0
        self.cpu_us = 0
        self.processing_us = Counter()
        self.poison: Optional[PoisonSpec] = None

    def attach(self, engine):
        self.router = Router(self.id, self.config, engine.registry)
        cfg = self.config.detectors
        if cfg is not None and "pollution" in cfg.enabled:
            engine.call_at(cfg.pollution_interval_us, self._pollution_tick, node=self.id)

    def _pollution_tick(self):
        eng = self.engine
        self._emit(self.router.run_pollution_detector(eng.now), eng.now)
        eng.call_at(eng.now + self.config.detectors.pollution_interval_us, self._pollution_tick, node=self.id)

    def _finish(self, now: int, kind: str) -> int:
        cost = self.router.last_cost_us
        start = max(now, self.busy_until)
        done = start + cost
        self.busy_until = done
        self.cpu_us += cost
        self.processing_us[kind] += done - now
        self.processing_us[kind + "_count"] += 1
        return done - now

    def receive_interest(self, interest: Interest, face: int):
        eng = self.engine
        actions = self.router.on_interest(interest, face, eng.now, eng.rng.stream(f"delay/{self.id}"))
        wait = self._finish(eng.now, "interest")
        outcome = "aggregated"
        for a in actions:
            if isinstance(a, Drop):
                outcome = "drop:" + a.reason
            elif isinstance(a, SendData):
                outcome = "cs_hit"
            elif isinstance(a, ForwardInterest):
                outcome = "forwarded"
        eng.record(self.id, "interest", interest.name, face, outcome)
        self._emit(actions, wait)

    def receive_data(self, obj: ContentObject, face: int):
        eng = self.engine
        if self.poison is not None and self.poison.matches(obj.name):
            obj = self.poison.forge(obj, eng.rng.stream(f"attack/poison/{self.id}"))
        actions = self.router.on_data(obj, face, eng.now, eng.rng.stream(f"cache/{self.id}"))
        wait = self._finish(eng.now, "data")
        sent = sum(1 for a in actions if isinstance(a, SendData))
        drops = [a for a in actions if isinstance(a, Drop)]
        eng.record(self.id, "data", obj.name, face, f"drop:{drops[0].reason}" if drops else f"delivered:{sent}")
        self._emit(actions, wait)

    def dump_state(self) -> dict:
        """Snapshot of cache names, PIT occupancy and counters, also traced."""
        r = self.router
        now = self.engine.now
        state = {
            "cs": [[str(nm), e.insert_time, e.last_access, e.hit_count] for nm, e in
                   ((nm, r.cs.entries[nm]) for nm in r.cs.names())],
            "pit_size": len(r.pit),
            "pit_mean": r.pit.mean_occupancy(now),
            "counters": dict(sorted(r.counters.items())),
        }
        self.engine.record(self.id, "state", None, None, json.dumps(state, sort_keys=True, separators=(",", ":")))
        return state

    def _emit(self, actions, wait=0):
        eng = self.engine
        for a in actions:
            if isinstance(a, ForwardInterest):
                eng.send(self.id, a.face, a.interest, wait)
            elif isinstance(a, SendData):
                eng.send(self.id, a.face, a.obj, wait + a.delay_us)
            elif isinstance(a, CacheInsert):
                eng.record(self.id, "cache_insert", a.name, None, "no_cache" if a.no_cache else "ok")
            elif isinstance(a, CacheEvict):
                eng.record(self.id, "cache_evict", a.name, None, a.reason)
            elif isinstance(a, RaiseFlag):
                f = a.flag
                eng.record(self.id, "flag", f.name, f.face, f"{f.detector}:{f.value:.4f}")


# -- hosts ------------------------------------------------------------------

@dataclass
class FetchResult:
    interest: Interest
    sent_at: int
    obj: Optional[ContentObject] = None
    received_at: Optional[int] = None
    outcome: str = "pending"
    verdict: Optional[Verdict] = None

    @property
    def rtt_us(self) -> Optional[int]:
        return None if self.received_at is None else self.received_at - self.sent_at

    @property
    def ok(self) -> bool:
        return self.outcome == "data"


class Pending:
    __slots__ = ("interest", "result", "callback", "resolved")

    def __init__(self, interest, result, callback):
        self.interest = interest
        self.result = result
        self.callback = callback
        self.resolved = False


class Fetch:
    """Process command: express an interest and wait for data or timeout."""

    def __init__(self, host: "Host", interest: Interest, timeout_us: int):
        self.host = host
        self.interest = interest
        self.timeout_us = timeout_us

    def start(self, proc):
        self.host.express(self.interest, self.timeout_us, proc.resume)


class Host(Node):
    """End host with a single uplink. Tracks its own outstanding interests."""

    def __init__(self, node_id: str, verify_data: bool = True):
        super().__init__(node_id)
        self.verify_data = verify_data
        self.outstanding: dict = {}
        self.counters = Counter()
        self.rtts: list = []
        self.log_requests = True
        self.track = True

    @property
    def uplink(self) -> int:
        return next(iter(self.faces))

    def nonce(self) -> bytes:
        return self.engine.rng.stream(f"nonce/{self.id}").randbytes(8)

    def interest(self, nm, **kw) -> Interest:
        return Interest(to_name(nm), nonce=self.nonce(), **kw)

    def send(self, interest: Interest):
        """Fire and forget."""
        eng = self.engine
        self.counters["sent_untracked"] += 1
        if self.log_requests:
            eng.request_log.append((eng.now, self.id, interest.name))
        eng.send(self.id, self.uplink, interest)

    def express(self, interest: Interest, timeout_us: int = 4_000_000,
                callback: Optional[Callable] = None) -> FetchResult:
        eng = self.engine
        result = FetchResult(interest, eng.now)
        pending = Pending(interest, result, callback)
        self.outstanding.setdefault(interest.name, []).append(pending)
        self.counters["sent"] += 1
        if self.log_requests:
            eng.request_log.append((eng.now, self.id, interest.name))
        eng.record(self.id, "express", interest.name, self.uplink, "sent")
        eng.call_at(eng.now + timeout_us, self._timeout, pending, kind=EventKind.TIMER_FIRE, node=self.id)
        eng.send(self.id, self.uplink, interest)
        return result

    def fetch(self, nm, timeout_us: int = 4_000_000, **kw) -> Fetch:
        interest = nm if isinstance(nm, Interest) else self.interest(nm, **kw)
        return Fetch(self, interest, timeout_us)

    def _timeout(self, pending: Pending):
        if pending.resolved:
            return
        self._resolve(pending, "timeout")
        self.engine.record(self.id, "timeout", pending.interest.name, None, "timeout")

    def _resolve(self, pending: Pending, outcome: str, obj=None, verdict=None):
        pending.resolved = True
        lst = self.outstanding.get(pending.interest.name)
        if lst is not None:
            lst.remove(pending)
            if not lst:
                del self.outstanding[pending.interest.name]
        r = pending.result
        r.outcome = outcome
        r.verdict = verdict
        if obj is not None:
            r.obj = obj
            r.received_at = self.engine.now
        if outcome == "data":
            self.counters["satisfied"] += 1
            self.rtts.append(r.rtt_us)
        else:
            self.counters[outcome] += 1
        if pending.callback is not None:
            pending.callback(r)

    def receive_data(self, obj: ContentObject, face: int):
        matched, refused = [], []
        for p in obj.name.prefixes():
            for pending in self.outstanding.get(p, ()):
                if obj.name not in pending.interest.exclude.excluded:
                    matched.append(pending)
                else:
                    refused.append(pending)
        if not matched:
            if refused:
                # the network ignored our exclude filter; tell the requester
                self.engine.record(self.id, "data", obj.name, face, "excluded")
                for pending in refused:
                    self._resolve(pending, "excluded", obj, None)
                return
            self.engine.record(self.id, "data", obj.name, face, "unsolicited")
            return
        verdict = None
        if self.verify_data:
            verdict = verify(self.engine.registry, obj.name, obj.payload, obj.signature)
        outcome = "data" if verdict in (None, Verdict.VALID) else "rejected"
        self.engine.record(self.id, "data", obj.name, face, outcome)
        for pending in matched:
            self._resolve(pending, outcome, obj, verdict)

    def pending_count(self) -> int:
        return sum(len(v) for v in self.outstanding.values())


# -- producers --------------------------------------------------------------

class Producer(Host):
    """Answers every interest under its prefix with a signed object."""

    def __init__(self, node_id: str, prefix, service_delay_ms: float = 5.0,
                 service_jitter_ms: float = 0.0, payload_size: int = 1024,
                 content_size: Optional[int] = None, chunk_size: int = 4096,
                 key_mode: str = "longlived", no_cache: bool = False,
                 no_cache_prefixes=(), slow_delay_ms: Optional[float] = None):
        super().__init__(node_id)
        if key_mode not in ("longlived", "ephemeral"):
            raise ValueError("key_mode must be longlived or ephemeral")
        self.prefix = to_name(prefix)
        self.service_delay_us = int(round(service_delay_ms * 1000))
        self.service_jitter_us = int(round(service_jitter_ms * 1000))
        if slow_delay_ms is not None:
            self.service_delay_us = int(round(slow_delay_ms * 1000))
        self.payload_size = payload_size
        self.content_size = content_size
        self.chunk_size = chunk_size
        self.key_mode = key_mode
        self.no_cache = no_cache
        self.no_cache_prefixes = [to_name(p) for p in no_cache_prefixes]
        self.key_id: Optional[KeyId] = None
        self._ephemeral: dict = {}

    def attach(self, engine):
        self.key_id = engine.registry.register(self.id, engine.rng.stream(f"keys/{self.id}"))

    def announced_prefixes(self):
        return (self.prefix,)

    @property
    def total_chunks(self) -> Optional[int]:
        if self.content_size is None:
            return None
        return max(1, math.ceil(self.content_size / self.chunk_size))

    def exists(self, nm: Name) -> bool:
        return is_prefix(self.prefix, nm) and nm != self.prefix

    def receive_interest(self, interest: Interest, face: int):
        eng = self.engine
        nm = interest.name
        if not self.exists(nm) or nm in interest.exclude.excluded:
            eng.record(self.id, "interest", nm, face, "ignored")
            return
        self.counters["served"] += 1
        eng.record(self.id, "interest", nm, face, "served")
        delay = self.service_delay_us
        if self.service_jitter_us:
            delay += int(eng.rng.stream(f"service/{self.id}").random() * self.service_jitter_us)
        eng.call_at(eng.now + delay, self._respond, nm, face, node=self.id)

    def _respond(self, nm: Name, face: int):
        obj = self.make_object(nm)
        self.engine.record(self.id, "data_out", nm, face, "sent")
        self.engine.send(self.id, face, obj)

    def signing_key(self, nm: Name) -> KeyId:
        if self.key_mode == "longlived":
            return self.key_id
        kid = self._ephemeral.get(nm)
        if kid is None:
            kid = self._ephemeral[nm] = ephemeral_key(
                self.engine.registry, self.id, self.engine.rng.stream(f"keys/{self.id}"))
        return kid

    def payload_for(self, nm: Name) -> bytes:
        size = self.payload_size
        idx = chunk_index_of(nm)
        if self.content_size is not None and idx is not None:
            start = idx * self.chunk_size
            size = max(0, min(self.chunk_size, self.content_size - start))
        return hashlib.shake_256(str(nm).encode()).digest(size) if size else b""

    def make_object(self, nm: Name) -> ContentObject:
        payload = self.payload_for(nm)
        idx = chunk_index_of(nm)
        no_cache = self.no_cache or any(is_prefix(p, nm) for p in self.no_cache_prefixes)
        return ContentObject(nm, payload, sign(self.engine.registry, self.signing_key(nm), nm, payload),
                             no_cache=no_cache,
                             chunk_index=idx if self.content_size is not None else None,
                             total_chunks=self.total_chunks if idx is not None else None)


class ConversationProducer(Producer):
    """Publishes a numbered (or opaque-named) message stream over time.

    Interests for messages not yet published are held and answered the
    moment the message appears, as a real-time pull stream would be.
    """

    def __init__(self, node_id: str, prefix, message_names, publish_times_us, sizes,
                 service_delay_ms: float = 1.0, hold_limit_us: int = 4_000_000, **kw):
        super().__init__(node_id, prefix, service_delay_ms=service_delay_ms, **kw)
        self.publish_at = dict(zip(message_names, publish_times_us))
        self.sizes = dict(zip(message_names, sizes))
        self.hold_limit_us = hold_limit_us
        self.held: dict = {}

    def exists(self, nm: Name) -> bool:
        return nm in self.publish_at

    def receive_interest(self, interest: Interest, face: int):
        eng = self.engine
        nm = interest.name
        if not self.exists(nm):
            eng.record(self.id, "interest", nm, face, "ignored")
            return
        t_pub = self.publish_at[nm]
        if t_pub <= eng.now:
            return super().receive_interest(interest, face)
        if t_pub - eng.now > self.hold_limit_us:
            eng.record(self.id, "interest", nm, face, "too_early")
            return
        eng.record(self.id, "interest", nm, face, "held")
        if (nm, face) not in self.held:
            self.held[(nm, face)] = True
            eng.call_at(t_pub, self._release, interest, face, node=self.id)

    def _release(self, interest, face):
        self.held.pop((interest.name, face), None)
        super().receive_interest(interest, face)

    def payload_for(self, nm: Name) -> bytes:
        return hashlib.shake_256(str(nm).encode()).digest(self.sizes[nm])


# -- consumer workloads -----------------------------------------------------

class Poisson:
    def __init__(self, rate_per_s: float):
        self.rate = rate_per_s

    def gaps(self, rng):
        while True:
            yield int(rng.expovariate(self.rate) * 1e6)


class Periodic:
    def __init__(self, period_ms: float, phase_ms: float = 0.0):
        self.period = int(round(period_ms * 1000))
        self.phase = int(round(phase_ms * 1000))

    def gaps(self, rng):
        yield self.phase
        while True:
            yield self.period


class Schedule:
    """Absolute request times in ms, relative to the workload start."""

    def __init__(self, times_ms):
        self.times = sorted(int(round(t * 1000)) for t in times_ms)

    def gaps(self, rng):
        prev = 0
        for t in self.times:
            yield t - prev
            prev = t


class FixedName:
    def __init__(self, nm):
        self.name = to_name(nm)

    def draw(self, rng) -> Name:
        return self.name


class ZipfNames:
    def __init__(self, prefix, catalog_size: int, alpha: float = 0.8):
        self.prefix = to_name(prefix)
        weights = [1.0 / (i ** alpha) for i in range(1, catalog_size + 1)]
        total = sum(weights)
        acc, self.cum = 0.0, []
        for w in weights:
            acc += w / total
            self.cum.append(acc)
        self.names = [self.prefix.append(f"item{i}") for i in range(catalog_size)]

    def draw(self, rng) -> Name:
        i = bisect.bisect_left(self.cum, rng.random())
        return self.names[min(i, len(self.names) - 1)]


class UniformNames:
    def __init__(self, prefix, catalog_size: int, tag: str = "item"):
        self.prefix = to_name(prefix)
        self.names = [self.prefix.append(f"{tag}{i}") for i in range(catalog_size)]

    def draw(self, rng) -> Name:
        return self.names[rng.randrange(len(self.names))]


class SequenceNames:
    def __init__(self, names):
        self.names = [to_name(n) for n in names]
        self._i = 0

    def draw(self, rng) -> Name:
        nm = self.names[self._i % len(self.names)]
        self._i += 1
        return nm


class UniqueNames:
    """Never repeats: ``prefix/<tag><counter>``."""

    def __init__(self, prefix, tag: str = "u"):
        self.prefix = to_name(prefix)
        self.tag = tag
        self._i = 0

    def draw(self, rng) -> Name:
        nm = self.prefix.append(f"{self.tag}{self._i}")
        self._i += 1
        return nm


def workload(host: Host, arrivals, names, start_us: int = 0, stop_us: Optional[int] = None,
             timeout_us: int = 4_000_000, chunks: Optional[int] = None,
             no_cache_request: bool = False, rng=None, tracked: bool = True):
    """Generator process issuing requests from ``arrivals`` x ``names``.

    With ``chunks`` set, each request fetches ``name/seg=0 .. seg=chunks-1``
    at once, as a consumer pulling a whole item would.
    """
    rng = rng or host.engine.rng.stream(f"workload/{host.id}")
    yield WaitUntil(start_us)
    t = start_us
    for gap in arrivals.gaps(rng):
        t += gap
        if stop_us is not None and t > stop_us:
            return
        yield WaitUntil(t)
        nm = names.draw(rng)
        targets = [nm] if not chunks else [nm.append(chunk_component(i)) for i in range(chunks)]
        for target in targets:
            interest = Interest(target, EMPTY_EXCLUDE, host.nonce(), no_cache_request=no_cache_request)
            if tracked:
                host.express(interest, timeout_us)
            else:
                host.send(interest)


def invariant_auditor(engine, event):
    """Post-event hook for debug runs: check the router the event touched."""
    from .router import check_invariants

    node = engine.nodes.get(event.node) if event.node else None
    if node is not None and node.is_router:
        check_invariants(node.router, engine.now)
