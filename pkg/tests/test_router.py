import dataclasses
import random

from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import interest
from ccnsim.names import ExcludeFilter, parse_name
from ccnsim.router import (ContentStore, Drop, Fib, ForwardInterest, Interest, LifetimeDist, Pit, SendData,
                           TokenBucket, apply_blacklist, cs_insert, cs_lookup, cs_remove, fib_lookup,
                           pit_expire, revalidate)


def n(text):
    return parse_name(text)


# FIB

def test_fib_longest_prefix():
    fib = Fib()
    fib.add(n("/"), 0)
    fib.add(n("/umass"), 1)
    assert fib_lookup(fib, n("/umass/cs")) == 1


def test_fib_no_match():
    fib = Fib()
    fib.add(n("/umass"), 1)
    assert fib_lookup(fib, n("/email/x")) is None


def test_fib_tie_lowest_face():
    fib = Fib()
    fib.add(n("/umass"), 2)
    fib.add(n("/umass"), 1)
    assert fib_lookup(fib, n("/umass/x")) == 1


# content store

def test_cs_exact_hit(make_obj):
    cs = ContentStore(4)
    obj = make_obj("/a/b")
    cs_insert(cs, obj, 0)
    assert cs_lookup(cs, interest("/a/b"), 1) is obj


def test_cs_no_cache_request_misses(make_obj):
    cs = ContentStore(4)
    cs_insert(cs, make_obj("/a/b"), 0)
    assert cs_lookup(cs, interest("/a/b", no_cache_request=True), 1) is None


def test_cs_expired_entry_misses(make_obj):
    cs = ContentStore(4, "FIFO", LifetimeDist("fixed", 100))
    cs_insert(cs, make_obj("/a"), 0)
    assert cs_lookup(cs, interest("/a"), 100) is not None
    assert cs_lookup(cs, interest("/a"), 101) is None


def test_cs_fifo_evicts_oldest(make_obj):
    cs = ContentStore(2, "FIFO")
    for i, x in enumerate("abc"):
        cs_insert(cs, make_obj(f"/{x}"), i)
    assert cs.names() == [n("/b"), n("/c")]


def test_cs_lru_evicts_least_recent(make_obj):
    cs = ContentStore(2, "LRU")
    cs_insert(cs, make_obj("/a"), 0)
    cs_insert(cs, make_obj("/b"), 1)
    cs_lookup(cs, interest("/a"), 2)
    cs_insert(cs, make_obj("/c"), 3)
    assert set(cs.names()) == {n("/a"), n("/c")}


def test_cs_random_uses_rng(make_obj):
    kept = set()
    for seed in range(20):
        cs = ContentStore(2, "RANDOM")
        cs_insert(cs, make_obj("/a"), 0)
        cs_insert(cs, make_obj("/b"), 1)
        cs_insert(cs, make_obj("/c"), 2, random.Random(seed))
        kept.add(tuple(cs.names()))
    assert len(kept) == 2


def test_cs_honors_no_cache(make_obj):
    cs = ContentStore(4)
    assert cs_insert(cs, make_obj("/a", no_cache=True), 0) is None
    assert len(cs) == 0


def test_cs_popularity_needs_k_requests(make_obj):
    cs = ContentStore(4, "POPULARITY", popularity_k=2)
    cs.note_request(n("/a"), 0)
    assert cs_insert(cs, make_obj("/a"), 1) is None
    cs.note_request(n("/a"), 2)
    assert cs_insert(cs, make_obj("/a"), 3) == []
    assert n("/a") in cs


def test_cs_popularity_evicts_lowest_count(make_obj):
    cs = ContentStore(2, "POPULARITY", popularity_k=1)
    for t, x in enumerate("aab"):
        cs.note_request(n(f"/{x}"), t)
    cs_insert(cs, make_obj("/a"), 3)
    cs_insert(cs, make_obj("/b"), 4)
    cs.note_request(n("/c"), 5)
    cs_insert(cs, make_obj("/c"), 6)
    assert set(cs.names()) == {n("/a"), n("/c")}


def test_cs_prefix_lookup_smallest_non_excluded(make_obj):
    cs = ContentStore(4)
    cs_insert(cs, make_obj("/email/work/2015"), 0)
    cs_insert(cs, make_obj("/email/private/2015"), 0)
    assert cs_lookup(cs, interest("/"), 1).name == n("/email/private/2015")
    ex = ExcludeFilter(frozenset({n("/email/private/2015")}))
    assert cs_lookup(cs, interest("/email", exclude=ex), 1).name == n("/email/work/2015")


def test_cs_exclude_ignored_when_disallowed(make_obj):
    cs = ContentStore(4)
    cs.allow_exclude = False
    cs_insert(cs, make_obj("/e/a"), 0)
    cs_insert(cs, make_obj("/e/b"), 0)
    ex = ExcludeFilter(frozenset({n("/e/a")}))
    assert cs_lookup(cs, interest("/e", exclude=ex), 1).name == n("/e/a")
    assert cs.exclude_ignored == 1


def test_cs_non_invasive_leaves_state(make_obj):
    cs = ContentStore(2, "LRU")
    cs_insert(cs, make_obj("/a"), 0)
    cs_insert(cs, make_obj("/b"), 1)
    cs_lookup(cs, interest("/a", non_invasive=True), 2)
    assert cs.entries[n("/a")].hit_count == 0
    cs_insert(cs, make_obj("/c"), 3)
    assert n("/a") not in cs


def test_cs_chunk_requests_disallowed(make_obj):
    cs = ContentStore(4)
    cs.allow_chunk_requests = False
    cs_insert(cs, make_obj("/v/seg=0"), 0)
    cs_insert(cs, make_obj("/v/seg=1"), 0)
    assert cs_lookup(cs, interest("/v/seg=0"), 1) is not None
    assert cs_lookup(cs, interest("/v/seg=1"), 1) is None


def test_remove_blacklist_revalidate(make_obj):
    cs = ContentStore(4)
    cs_insert(cs, make_obj("/x"), 0)
    assert cs_remove(cs, n("/x")) is True
    assert cs_remove(cs, n("/x")) is False
    cs_insert(cs, make_obj("/x"), 0)
    assert apply_blacklist(cs, [n("/x"), n("/y")]) == 1
    cs_insert(cs, make_obj("/z"), 0)
    assert revalidate(cs, 1, lambda obj, now: True) == 0
    assert revalidate(cs, 1, lambda obj, now: False) == 1


@settings(max_examples=60)
@given(st.lists(st.tuples(st.sampled_from("io"), st.integers(0, 15)), max_size=80),
       st.sampled_from(["FIFO", "LRU", "RANDOM", "POPULARITY"]), st.integers(1, 5))
def test_cs_capacity_and_expiry_invariants(ops, policy, cap):
    from ccnsim.crypto import KeyId, Signature
    from ccnsim.router import ContentObject

    cs = ContentStore(cap, policy, LifetimeDist("fixed", 7), popularity_k=1)
    rng = random.Random(0)
    sig = Signature(KeyId(b"\0" * 8), b"\0" * 32)
    for t, (op, k) in enumerate(ops):
        nm = n(f"/k/{k}")
        if op == "i":
            cs.note_request(nm, t)
            cs_insert(cs, ContentObject(nm, b"", sig), t, rng)
        else:
            obj = cs_lookup(cs, Interest(nm), t)
            if obj is not None:
                # an entry is only ever returned before its expiry
                entry = cs.entries[nm]
                assert entry.expiry is None or t <= entry.expiry
        assert len(cs) <= cap


# PIT

def test_pit_expire_boundaries():
    pit = Pit(timeout_us=5)
    pit.create(n("/a"), 0)
    assert pit.expire(4) == 0
    assert pit.expire(5) == 0
    assert pit.expire(6) == 1


def test_pit_expire_all():
    pit = Pit(timeout_us=5)
    for i in range(7):
        pit.create(n(f"/a/{i}"), 0)
    assert pit.expire(100) == 7


def test_pit_expire_on_router(make_router):
    r = make_router(pit_timeout_us=5)
    r.on_interest(interest("/a"), 1, 0)
    assert pit_expire(r, 6) == 1


def test_pit_mean_occupancy():
    pit = Pit(timeout_us=10)
    pit.create(n("/a"), 0)
    pit.create(n("/b"), 5)
    pit.expire(100)
    # /a alive 0..10, /b alive 5..15 over 0..20
    assert pit.mean_occupancy(20) == 20 / 20


# pipeline

def test_aggregation_single_forward(make_router):
    r = make_router()
    a1 = r.on_interest(interest("/a"), 1, 0)
    a2 = r.on_interest(interest("/a"), 2, 1)
    fwd = [a for a in a1 + a2 if isinstance(a, ForwardInterest)]
    assert len(fwd) == 1 and a2 == []


def test_aggregation_keeps_original_expiry(make_router):
    r = make_router(pit_timeout_us=100)
    r.on_interest(interest("/a"), 1, 0)
    r.on_interest(interest("/a"), 2, 50)
    assert r.pit.get(n("/a")).expiry == 100


def test_duplicate_nonce_dropped(make_router):
    r = make_router()
    i = interest("/a")
    r.on_interest(i, 1, 0)
    out = r.on_interest(i, 2, 1)
    assert out == [Drop("duplicate_nonce", n("/a"))]


def test_pit_overflow(make_router):
    r = make_router(pit_capacity=1)
    r.on_interest(interest("/a"), 1, 0)
    assert r.on_interest(interest("/b"), 1, 0) == [Drop("pit_overflow", n("/b"))]


def test_no_route(registry):
    from ccnsim.router import Router, RouterConfig

    r = Router("r", RouterConfig(), registry)
    assert r.on_interest(interest("/a"), 1, 0) == [Drop("no_route", n("/a"))]
    assert r.counters["drop:no_route"] == 1


def test_limiter_drops_over_budget(make_router):
    r = make_router(per_domain_limit=10)
    dropped = 0
    for i in range(200):   # 100/s over two seconds
        out = r.on_interest(interest(f"/victim/{i}"), 1, i * 10_000)
        if i >= 100:
            dropped += any(isinstance(a, Drop) and a.reason == "rate_limit" for a in out)
    assert dropped >= 90


def test_limiter_per_domain_independent():
    tb = TokenBucket(1, 1)
    assert tb.allow("a", 0)
    assert not tb.allow("a", 1)
    assert tb.allow("b", 1)
    assert tb.allow("a", 1_000_001)


def test_data_fans_out_to_faces(make_router, make_obj):
    r = make_router()
    for face in (1, 2, 3):
        r.on_interest(interest("/a"), face, 0)
    out = r.on_data(make_obj("/a"), 9, 10)
    assert sorted(a.face for a in out if isinstance(a, SendData)) == [1, 2, 3]
    assert n("/a") not in r.pit and n("/a") in r.cs


def test_cs_hit_with_delay(make_router, make_obj):
    r = make_router(hit_delay_min_us=7)
    r.on_interest(interest("/a"), 1, 0)
    r.on_data(make_obj("/a"), 9, 1)
    out = r.on_interest(interest("/a"), 2, 2)
    assert out == [SendData(2, out[0].obj, 7, True)]


def test_unsolicited_dropped(make_router, make_obj):
    r = make_router()
    assert r.on_data(make_obj("/a"), 9, 0) == [Drop("unsolicited", n("/a"))]
    assert len(r.cs) == 0


def test_verifying_router_blocks_poison(make_router, make_obj):
    from ccnsim.crypto import KeyId, Signature
    from ccnsim.router import ContentObject

    forged = ContentObject(n("/a"), b"evil", Signature(KeyId(b"\x07" * 8), b"\0" * 32))
    r = make_router(verify_signatures=True)
    r.on_interest(interest("/a"), 1, 0)
    out = r.on_data(forged, 9, 1)
    assert not any(isinstance(a, SendData) for a in out)
    assert len(r.cs) == 0 and r.counters["poison_block"] == 1
    assert r.last_cost_us == 50

    r = make_router(verify_signatures=False)
    r.on_interest(interest("/a"), 1, 0)
    out = r.on_data(forged, 9, 1)
    assert any(isinstance(a, SendData) for a in out) and n("/a") in r.cs


def test_non_invasive_miss_not_forwarded(make_router):
    r = make_router()
    out = r.on_interest(interest("/a", non_invasive=True), 1, 0)
    assert out == [Drop("non_invasive_miss", n("/a"))]
    r = make_router(allow_non_invasive=False)
    out = r.on_interest(interest("/a", non_invasive=True), 1, 0)
    assert isinstance(out[0], ForwardInterest)


def test_no_cache_request_skips_insert(make_router, make_obj):
    r = make_router()
    r.on_interest(interest("/a", no_cache_request=True), 1, 0)
    r.on_data(make_obj("/a"), 9, 1)
    assert len(r.cs) == 0


def test_interest_has_no_consumer_field():
    fields = {f.name for f in dataclasses.fields(Interest)}
    assert fields == {"name", "exclude", "nonce", "non_invasive", "no_cache_request"}


# the fixtures are factories, so sharing them across examples is safe
@settings(max_examples=50, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.tuples(st.sampled_from("id"), st.integers(0, 4), st.integers(1, 4)), max_size=60))
def test_data_only_to_requesting_faces(make_router, make_obj, events):
    r = make_router(pit_timeout_us=1_000)
    for t, (kind, k, face) in enumerate(events):
        now = t * 100
        if kind == "i":
            r.on_interest(interest(f"/k/{k}"), face, now)
            continue
        entry = r.pit.get(n(f"/k/{k}"))
        live = set(entry.faces) if entry is not None and entry.expiry >= now else set()
        out = r.on_data(make_obj(f"/k/{k}"), 9, now)
        sent = {a.face for a in out if isinstance(a, SendData)}
        assert sent <= live
