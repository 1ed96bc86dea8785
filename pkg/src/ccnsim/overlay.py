"""Two-hop onion circuits over the simulated network.

A consumer picks two anonymizing routers (ARs), hands each a fresh
symmetric key, and sends one interest through them. The entry AR sees who
asked but not what; the exit AR sees what was asked but not by whom. Every
layer carries a short MAC so a tampered blob is dropped instead of being
decrypted into garbage.
"""
from __future__ import annotations

import hashlib
import hmac
import statistics
import struct
from dataclasses import dataclass, field
from typing import Optional

from .crypto import KeyId, Signature, Verdict, sign, sym_decrypt, sym_encrypt, verify
from .engine import EventKind, WaitUntil
from .names import Name, name as to_name, parse_name
from .nodes import Host
from .router import ContentObject, Interest

AR_ROOT = "ar"
SETUP = "setup"
CID_SIZE = 8
KEY_SIZE = 16
TAG_SIZE = 8
# first plaintext byte of a layer: relay onward, or issue natively
RELAY = b"\x01"
EXIT = b"\x00"


class CircuitError(RuntimeError):
    pass


def ar_prefix(ar_id: str) -> Name:
    return Name((AR_ROOT, ar_id))


def _tag(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()[:TAG_SIZE]


def seal(key: bytes, plaintext: bytes) -> bytes:
    ct = sym_encrypt(key, plaintext)
    return ct + _tag(key, ct)


def unseal(key: bytes, blob: bytes) -> Optional[bytes]:
    """Inverse of :func:`seal`; None if the MAC does not check out."""
    if len(blob) < TAG_SIZE:
        return None
    ct, tag = blob[:-TAG_SIZE], blob[-TAG_SIZE:]
    if not hmac.compare_digest(_tag(key, ct), tag):
        return None
    return sym_decrypt(key, ct)


def pack_object(obj: ContentObject) -> bytes:
    nm = str(obj.name).encode()
    return struct.pack(">H", len(nm)) + nm + obj.signature.key_id.raw + obj.signature.digest + obj.payload


def unpack_object(raw: bytes) -> ContentObject:
    (n,) = struct.unpack(">H", raw[:2])
    nm = parse_name(raw[2:2 + n].decode())
    rest = raw[2 + n:]
    sig = Signature(KeyId(rest[:8]), rest[8:40])
    return ContentObject(nm, rest[40:], sig)


@dataclass
class Circuit:
    entry_ar: str
    exit_ar: str
    k1: bytes
    k2: bytes
    cid1: bytes
    cid2: bytes
    state: str = "fresh"
    setup_us: int = 0

    def advance(self, new_state: str):
        order = ("fresh", "used", "closed")
        if order.index(new_state) != order.index(self.state) + 1:
            raise CircuitError(f"circuit cannot go from {self.state} to {new_state}")
        self.state = new_state


@dataclass(frozen=True)
class WrappedMessage:
    prefix: Name
    blob: bytes

    @property
    def name(self) -> Name:
        return self.prefix.append(self.blob.hex())


def choose_ars(directory, rng) -> tuple:
    ars = sorted(set(directory))
    if len(ars) < 2:
        raise CircuitError("a circuit needs at least two distinct anonymizing routers")
    entry, exit_ = rng.sample(ars, 2)
    return entry, exit_


def build_circuit(consumer: Host, directory, rng, timeout_us: int = 2_000_000):
    """Pick two ARs and install one key at each.

    Returns a generator process whose result is a fresh :class:`Circuit`.
    Key delivery costs one round trip per AR; the key travels sealed under
    the AR's registered secret, which stands in for its public key.
    """
    entry, exit_ = choose_ars(directory, rng)
    circuit = Circuit(entry, exit_, rng.randbytes(KEY_SIZE), rng.randbytes(KEY_SIZE),
                      rng.randbytes(CID_SIZE), rng.randbytes(CID_SIZE))
    return _setup(consumer, circuit, timeout_us)


def _setup(consumer, circuit, timeout_us):
    eng = consumer.engine
    start = eng.now
    for ar_id, cid, key in ((circuit.entry_ar, circuit.cid1, circuit.k1),
                            (circuit.exit_ar, circuit.cid2, circuit.k2)):
        ar = eng.nodes[ar_id]
        secret = eng.registry.secrets[ar.key_id]
        blob = seal(secret, cid + key)
        res = yield consumer.fetch(ar_prefix(ar_id).append(SETUP, blob.hex()), timeout_us)
        if not res.ok:
            raise CircuitError(f"key setup with {ar_id} failed ({res.outcome})")
    circuit.setup_us = eng.now - start
    return circuit


def wrap_interest(circuit: Circuit, interest) -> WrappedMessage:
    """Encrypt the inner name for the exit, then for the entry."""
    if circuit.state != "fresh":
        raise CircuitError("a circuit carries exactly one interest")
    inner = str(interest.name if isinstance(interest, Interest) else to_name(interest)).encode()
    layer2 = circuit.cid2 + seal(circuit.k2, EXIT + inner)
    hop = circuit.exit_ar.encode()
    layer1 = circuit.cid1 + seal(circuit.k1, RELAY + struct.pack(">H", len(hop)) + hop + layer2)
    circuit.advance("used")
    return WrappedMessage(ar_prefix(circuit.entry_ar), layer1)


def unwrap_data(circuit: Circuit, obj: ContentObject) -> Optional[ContentObject]:
    """Peel the entry then the exit layer off a returned object."""
    inner = unseal(circuit.k1, obj.payload)
    if inner is None:
        return None
    inner = unseal(circuit.k2, inner)
    if inner is None:
        return None
    return unpack_object(inner)


class AnonymizingRouter(Host):
    """Overlay relay attached to the network like any host.

    It serves ``/ar/<id>/setup/..`` (key installation) and
    ``/ar/<id>/<blob>`` (one layer of a wrapped interest).
    """

    def __init__(self, node_id: str, fetch_timeout_us: int = 4_000_000):
        super().__init__(node_id)
        self.prefix = ar_prefix(node_id)
        self.keys: dict = {}
        self.fetch_timeout_us = fetch_timeout_us
        self.key_id: Optional[KeyId] = None
        self.layers_removed = 0
        self.layers_added = 0

    def attach(self, engine):
        self.key_id = engine.registry.register(self.id, engine.rng.stream(f"keys/{self.id}"))

    def announced_prefixes(self):
        return (self.prefix,)

    def _drop(self, interest, face, reason):
        self.counters["dropped"] += 1
        self.engine.record(self.id, "interest", interest.name, face, "drop:" + reason)

    def _answer(self, nm: Name, payload: bytes, face: int):
        eng = self.engine
        obj = ContentObject(nm, payload, sign(eng.registry, self.key_id, nm, payload))
        eng.record(self.id, "data_out", nm, face, "sent")
        eng.send(self.id, face, obj)

    def receive_interest(self, interest: Interest, face: int):
        nm = interest.name
        if len(nm) < 3 or nm.prefix(2) != self.prefix:
            return self._drop(interest, face, "not_mine")
        try:
            blob = bytes.fromhex(nm.components[-1])
        except ValueError:
            return self._drop(interest, face, "bad_blob")
        if len(nm) == 4 and nm.components[2] == SETUP:
            return self._setup(interest, face, blob)
        if len(nm) != 3 or len(blob) <= CID_SIZE:
            return self._drop(interest, face, "bad_blob")
        cid, body = blob[:CID_SIZE], blob[CID_SIZE:]
        key = self.keys.get(cid)
        if key is None:
            return self._drop(interest, face, "unknown_circuit")
        plain = unseal(key, body)
        if plain is None:
            return self._drop(interest, face, "bad_layer")
        self.layers_removed += 1
        del self.keys[cid]
        self.engine.record(self.id, "interest", nm, face, "unwrapped")
        role, rest = plain[:1], plain[1:]
        if role == RELAY and len(rest) >= 2:
            (n,) = struct.unpack(">H", rest[:2])
            try:
                onward = ar_prefix(rest[2:2 + n].decode()).append(rest[2 + n:].hex())
            except (UnicodeDecodeError, ValueError):
                return self._drop(interest, face, "bad_inner")
        elif role == EXIT:
            try:
                onward = parse_name(rest.decode())
            except (UnicodeDecodeError, ValueError):
                return self._drop(interest, face, "bad_inner")
        else:
            return self._drop(interest, face, "bad_inner")
        relay = role == RELAY
        self.express(Interest(onward, nonce=self.nonce()), self.fetch_timeout_us,
                     lambda res: self._relay_back(res, nm, face, key, relay))

    def _setup(self, interest, face, blob):
        secret = self.engine.registry.secrets[self.key_id]
        plain = unseal(secret, blob)
        if plain is None or len(plain) != CID_SIZE + KEY_SIZE:
            return self._drop(interest, face, "bad_setup")
        self.keys[plain[:CID_SIZE]] = plain[CID_SIZE:]
        self.engine.record(self.id, "interest", interest.name, face, "key_installed")
        self._answer(interest.name, b"ok", face)

    def _relay_back(self, res, wrapped_name: Name, face: int, key: bytes, relay: bool):
        if not res.ok:
            self.engine.record(self.id, "timeout", wrapped_name, face, res.outcome)
            return
        obj = res.obj
        # from the next relay we re-seal its sealed content; at the exit we
        # seal the producer's name, payload and signature together
        inner = obj.payload if relay else pack_object(obj)
        self.layers_added += 1
        self._answer(wrapped_name, seal(key, inner), face)


@dataclass
class OverlayFetch:
    name: Name
    circuit: Optional[Circuit] = None
    obj: Optional[ContentObject] = None
    verdict: Optional[Verdict] = None
    rtt_us: Optional[int] = None
    total_us: Optional[int] = None
    outcome: str = "pending"

    @property
    def ok(self) -> bool:
        return self.outcome == "data" and self.verdict is Verdict.VALID


def fetch_via_circuit(consumer: Host, directory, target, rng=None, timeout_us: int = 4_000_000):
    """Build a fresh circuit, send ``target`` through it, unwrap the answer."""
    eng = consumer.engine
    rng = rng or eng.rng.stream(f"overlay/{consumer.id}")
    target = to_name(target)
    out = OverlayFetch(target)
    start = eng.now
    circuit = yield from build_circuit(consumer, directory, rng)
    out.circuit = circuit
    wrapped = wrap_interest(circuit, target)
    res = yield consumer.fetch(wrapped.name, timeout_us)
    out.total_us = eng.now - start
    circuit.advance("closed")
    if not res.ok:
        out.outcome = res.outcome
        return out
    out.rtt_us = res.rtt_us
    obj = unwrap_data(circuit, res.obj)
    if obj is None:
        out.outcome = "bad_layer"
        return out
    out.obj = obj
    out.verdict = verify(eng.registry, obj.name, obj.payload, obj.signature)
    out.outcome = "data" if obj.name == target else "wrong_name"
    return out


@dataclass
class OverheadReport:
    direct_rtts: list = field(default_factory=list)
    overlay_rtts: list = field(default_factory=list)
    overlay_totals: list = field(default_factory=list)
    direct_hit_rate: Optional[float] = None
    overlay_hit_rate: Optional[float] = None
    payload_matches: bool = True

    @property
    def rtt_ratio(self) -> float:
        return statistics.fmean(self.overlay_rtts) / statistics.fmean(self.direct_rtts)


def wrapped_hit_rate(engine, routers=None) -> Optional[float]:
    """Cache hit rate of routers on ``/ar/...`` interests, read from the trace."""
    routers = set(routers or engine.router_ids())
    hits = lookups = 0
    for rec in engine.trace:
        if rec.kind != "interest" or rec.node not in routers or not rec.name.startswith(f"/{AR_ROOT}/"):
            continue
        if rec.outcome == "cs_hit":
            hits += 1
            lookups += 1
        elif rec.outcome in ("forwarded", "aggregated", "drop:no_route", "drop:pit_overflow"):
            lookups += 1
    return hits / lookups if lookups else None


def measure_overhead(factory, consumer_id: str, directory, names, seed: int = 0,
                     gap_us: int = 1_000_000, edge_routers=None) -> OverheadReport:
    """Fetch ``names`` directly and through fresh circuits in paired engines.

    ``factory(seed)`` must return a ready engine (tracing on) containing the
    consumer and the ARs. Hit rates are taken at ``edge_routers``, the
    routers between the consumer and its entry relay.
    """
    names = [to_name(n) for n in names]
    report = OverheadReport()
    direct_payloads, overlay_payloads = [], []

    def direct_proc(host):
        for nm in names:
            res = yield host.fetch(nm)
            report.direct_rtts.append(res.rtt_us)
            direct_payloads.append(res.obj.payload if res.ok else None)
            yield WaitUntil(host.engine.now + gap_us)

    def overlay_proc(host):
        for nm in names:
            res = yield from fetch_via_circuit(host, directory, nm)
            report.overlay_rtts.append(res.rtt_us)
            report.overlay_totals.append(res.total_us)
            overlay_payloads.append(res.obj.payload if res.ok else None)
            yield WaitUntil(host.engine.now + gap_us)

    for proc in (direct_proc, overlay_proc):
        eng = factory(seed)
        p = eng.spawn(proc(eng.nodes[consumer_id]), kind=EventKind.WORKLOAD_TICK, node=consumer_id)
        horizon = eng.now + len(names) * (gap_us + 20_000_000)
        while not p.done and eng.pending_events() and eng.now < horizon:
            eng.run_until(min(horizon, eng.now + gap_us))
        if proc is direct_proc:
            report.direct_hit_rate = _counter_hit_rate(eng, edge_routers)
        else:
            report.overlay_hit_rate = wrapped_hit_rate(eng, edge_routers)
    report.payload_matches = None not in overlay_payloads and overlay_payloads == direct_payloads
    return report


def _counter_hit_rate(engine, routers) -> Optional[float]:
    hits = lookups = 0
    for rid in routers or engine.router_ids():
        c = engine.nodes[rid].router.counters
        hits += c["cs_hits"]
        lookups += c["cs_lookups"]
    return hits / lookups if lookups else None
