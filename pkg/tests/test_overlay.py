import random
from dataclasses import fields

import pytest

from ccnsim.crypto import KeyId, Signature
from ccnsim.engine import Engine
from ccnsim.names import name
from ccnsim.nodes import Host, Producer, RouterNode
from ccnsim.overlay import (AR_ROOT, AnonymizingRouter, Circuit, CircuitError, WrappedMessage, build_circuit,
                            choose_ars, fetch_via_circuit, measure_overhead, seal, unseal, unwrap_data, wrap_interest)
from ccnsim.router import ContentObject, Interest
from helpers import run_proc

DIRECTORY = ("ar1", "ar2", "ar3")


def overlay_engine(seed=0):
    eng = Engine(seed, trace=True)
    for rid in ("edge", "core"):
        eng.add_node(RouterNode(rid))
    eng.add_node(Host("alice"))
    for ar in DIRECTORY:
        eng.add_node(AnonymizingRouter(ar))
        eng.connect(ar, "core", 2)
    eng.add_node(Producer("news", "/news"))
    eng.connect("alice", "edge", 5)
    eng.connect("edge", "core", 10)
    eng.connect("news", "core", 5)
    eng.install_routes()
    return eng


def circuit(entry="ar1", exit_="ar2"):
    rng = random.Random(1)
    return Circuit(entry, exit_, rng.randbytes(16), rng.randbytes(16), rng.randbytes(8), rng.randbytes(8))


def test_two_relays_are_distinct():
    for seed in range(20):
        entry, exit_ = choose_ars(["a", "b"], random.Random(seed))
        assert {entry, exit_} == {"a", "b"}


def test_relay_choice_depends_only_on_seed():
    ars = ["a", "b", "c", "d", "e"]
    assert choose_ars(ars, random.Random(5)) == choose_ars(list(reversed(ars)), random.Random(5))


@pytest.mark.parametrize("directory", [[], ["only"], ["same", "same"]])
def test_too_small_directory(directory):
    with pytest.raises(CircuitError):
        choose_ars(directory, random.Random(0))


def test_seal_roundtrip_and_tamper():
    key = bytes(range(16))
    blob = seal(key, b"hello")
    assert unseal(key, blob) == b"hello"
    assert unseal(key, bytes([blob[0] ^ 1]) + blob[1:]) is None
    assert unseal(bytes(16), blob) is None
    assert unseal(key, b"x") is None


def test_wrap_then_peel_two_layers():
    c = circuit()
    msg = wrap_interest(c, "/news/today")
    assert msg.prefix == name(f"/{AR_ROOT}/ar1")
    assert msg.blob[:8] == c.cid1
    layer1 = unseal(c.k1, msg.blob[8:])
    assert layer1[:1] == b"\x01"
    hop_len = int.from_bytes(layer1[1:3], "big")
    assert layer1[3:3 + hop_len] == b"ar2"
    layer2 = layer1[3 + hop_len:]
    assert layer2[:8] == c.cid2
    assert unseal(c.k2, layer2[8:]) == b"\x00/news/today"


def test_circuit_carries_one_interest():
    c = circuit()
    wrap_interest(c, "/a")
    with pytest.raises(CircuitError):
        wrap_interest(c, "/b")


def test_circuit_states():
    c = circuit()
    assert c.state == "fresh"
    c.advance("used")
    c.advance("closed")
    with pytest.raises(CircuitError):
        c.advance("used")
    with pytest.raises(CircuitError):
        circuit().advance("closed")


def test_wrapped_message_has_no_consumer_field():
    assert [f.name for f in fields(WrappedMessage)] == ["prefix", "blob"]
    msg = wrap_interest(circuit(), Interest(name("/news/today")))
    assert b"alice" not in msg.blob and "alice" not in str(msg.name)


def test_full_fetch_through_circuit():
    eng = overlay_engine()
    res = run_proc(eng, fetch_via_circuit(eng.nodes["alice"], DIRECTORY, "/news/today"), 10_000_000)
    assert res.ok and res.obj.name == name("/news/today")
    assert res.circuit.state == "closed"
    assert sum(eng.nodes[a].layers_removed for a in DIRECTORY) == 2
    assert sum(eng.nodes[a].layers_added for a in DIRECTORY) == 2


def test_exit_interest_looks_native():
    eng = overlay_engine()
    run_proc(eng, fetch_via_circuit(eng.nodes["alice"], DIRECTORY, "/news/today"), 10_000_000)
    arrivals = [r for r in eng.trace if r.node == "news" and r.kind == "interest"]
    assert [r.name for r in arrivals] == ["/news/today"]
    direct = overlay_engine()

    def once():
        yield direct.nodes["alice"].fetch("/news/today")

    run_proc(direct, once(), 10_000_000)
    direct_arrivals = [r for r in direct.trace if r.node == "news" and r.kind == "interest"]
    assert [(r.kind, r.name, r.outcome) for r in arrivals] == [(r.kind, r.name, r.outcome) for r in direct_arrivals]


def test_tampered_layer_dropped():
    eng = overlay_engine()
    alice = eng.nodes["alice"]

    def proc():
        c = yield from build_circuit(alice, DIRECTORY, random.Random(3))
        msg = wrap_interest(c, "/news/today")
        bad = WrappedMessage(msg.prefix, msg.blob[:-1] + bytes([msg.blob[-1] ^ 0xFF]))
        return (yield alice.fetch(bad.name, 1_000_000)), c

    res, c = run_proc(eng, proc(), 10_000_000)
    assert res.outcome == "timeout"
    assert eng.nodes[c.entry_ar].counters["dropped"] == 1
    assert eng.nodes["news"].counters["served"] == 0


def test_foreign_layer_cannot_be_unwrapped():
    c = circuit()
    junk = ContentObject(name("/ar/ar1/x"), seal(bytes(16), b"nope"), Signature(KeyId(bytes(8)), bytes(32)))
    assert unwrap_data(c, junk) is None


def test_overhead_and_cache_bypass():
    names = ["/news/today", "/news/today", "/news/today"]
    report = measure_overhead(overlay_engine, "alice", DIRECTORY, names, seed=4, edge_routers=["edge"])
    assert report.payload_matches
    assert report.overlay_hit_rate == 0.0
    assert report.direct_hit_rate > 0
    # setup round trips come on top of a longer path
    assert min(report.overlay_totals) > max(report.direct_rtts)
    assert report.rtt_ratio > 1
