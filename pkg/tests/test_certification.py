import random

import pytest
from hypothesis import given, settings, strategies as st

from ratc.certification import (
    ABORT, COMMIT, EMPTY, Payload, Serializability, ShardMap, meet, meet_all, project,
    shards_of, weaker_or_equal,
)

from conftest import OBJECTS, random_payload

SM = ShardMap(shards=("s1", "s2", "s3"))
CERT = Serializability(SM)
SHARDS = ("s1", "s2", "s3")


# -- independent oracles, written straight from the definitions ---------------

def oracle_global(L, l):
    return COMMIT if all(not (x == y and other.commit_version > v)
                         for (x, v) in l.reads for other in L for (y, _) in other.writes) else ABORT


def oracle_committed_local(s, L, l):
    ok = True
    for x, v in l.reads:
        if SM.shard_of(x) != s:
            continue
        for other in L:
            for y, _ in other.writes:
                if y == x and other.commit_version > v:
                    ok = False
    return COMMIT if ok else ABORT


def oracle_prepared_local(s, L, l):
    mine_r = {x for x, _ in l.reads if SM.shard_of(x) == s}
    mine_w = {x for x, _ in l.writes if SM.shard_of(x) == s}
    for other in L:
        if mine_r & {y for y, _ in other.writes}:
            return ABORT
        if mine_w & {y for y, _ in other.reads}:
            return ABORT
    return COMMIT


@st.composite
def payloads(draw):
    objs = draw(st.lists(st.sampled_from(OBJECTS), max_size=3, unique=True))
    reads = {x: draw(st.integers(0, 3)) for x in objs}
    writes = {x: draw(st.sampled_from("ab")) for x in objs if draw(st.booleans())}
    vc = 1 + max(reads.values(), default=0) + draw(st.integers(0, 2))
    return Payload.make(reads, writes, vc)


payload_sets = st.lists(payloads(), max_size=4)


# -- decisions ------------------------------------------------------------------

@pytest.mark.parametrize("a,b,want", [
    (COMMIT, COMMIT, COMMIT), (COMMIT, ABORT, ABORT), (ABORT, COMMIT, ABORT), (ABORT, ABORT, ABORT),
])
def test_meet_table(a, b, want):
    assert meet(a, b) is want
    assert (a & b) is want


def test_meet_all_empty_is_commit():
    assert meet_all([]) is COMMIT
    assert meet_all([COMMIT, ABORT, COMMIT]) is ABORT


def test_vote_bound_order():
    assert weaker_or_equal(ABORT, COMMIT)
    assert weaker_or_equal(COMMIT, COMMIT) and weaker_or_equal(ABORT, ABORT)
    assert not weaker_or_equal(COMMIT, ABORT)


# -- payloads and projection ------------------------------------------------------

def test_payload_validation():
    with pytest.raises(ValueError):
        Payload.make({"s1:x": 1}, {"s1:y": "a"})
    with pytest.raises(ValueError):
        Payload.make({"s1:x": 3}, {}, commit_version=3)
    assert Payload.make({"s1:x": 1}).commit_version == 2


def test_project_keeps_owned_objects():
    m = ShardMap({"x": "s1", "y": "s2"})
    l = Payload.make({"x": 1, "y": 2}, {"x": "a"})
    p = project(l, "s1", m)
    assert p.reads == frozenset({("x", 1)}) and p.writes == frozenset({("x", "a")})
    assert p.commit_version == l.commit_version


def test_project_empty_and_foreign():
    assert project(EMPTY, "s1", SM).is_empty
    l = Payload.make({"s2:y": 0}, {"s2:y": "b"})
    assert project(l, "s1", SM).is_empty


def test_shards_of():
    assert shards_of(Payload.make({"s1:x": 0, "s2:y": 0}), SM) == {"s1", "s2"}
    assert shards_of(EMPTY, SM) == frozenset()
    assert shards_of(Payload.make({"s3:z": 0}), SM) == {"s3"}


def test_unknown_object_raises():
    with pytest.raises(KeyError):
        ShardMap().shard_of("plain")


# -- certification examples -------------------------------------------------------

def test_global_examples():
    l = Payload.make({"s1:x": 1})
    assert CERT.certify_global([], l) is COMMIT
    overwriter = Payload.make({"s1:x": 1}, {"s1:x": "b"}, 2)
    assert CERT.certify_global([overwriter], l) is ABORT
    other = Payload.make({"s1:y": 0}, {"s1:y": "c"}, 5)
    assert CERT.certify_global([other], l) is oracle_global([other], l) is COMMIT


def test_committed_local_examples():
    assert CERT.certify_committed_local("s1", [Payload.make({"s1:x": 0}, {"s1:x": "a"})], EMPTY) is COMMIT
    l = Payload.make({"s1:x": 1})
    w = Payload.make({"s1:x": 1}, {"s1:x": "b"}, 2)
    assert CERT.certify_committed_local("s1", [w], l) is ABORT
    assert CERT.certify_committed_local("s2", [w], l) is oracle_committed_local("s2", [w], l) is COMMIT


def test_prepared_local_examples():
    writer = Payload.make({"s1:x": 0}, {"s1:x": "a"})
    reader = Payload.make({"s1:x": 0})
    assert CERT.certify_prepared_local("s1", [writer], Payload.make({"s1:x": 0})) is ABORT
    assert CERT.certify_prepared_local("s1", [reader], Payload.make({"s1:x": 0}, {"s1:x": "b"})) is ABORT
    disjoint = Payload.make({"s1:y": 0}, {"s1:y": "c"})
    assert CERT.certify_prepared_local("s1", [writer], disjoint) is oracle_prepared_local(
        "s1", [writer], disjoint) is COMMIT


# -- algebraic laws over >= 10^4 random cases -------------------------------------

@settings(max_examples=2_000, deadline=None)
@given(payload_sets, payload_sets, payloads())
def test_distributive_global(L1, L2, l):
    assert CERT.certify_global(L1 + L2, l) is meet(CERT.certify_global(L1, l), CERT.certify_global(L2, l))
    assert CERT.certify_global(L1 + L2, l) is oracle_global(L1 + L2, l)


@settings(max_examples=2_000, deadline=None)
@given(payload_sets, payload_sets, payloads(), st.sampled_from(SHARDS))
def test_distributive_local(L1, L2, l, s):
    f = CERT.certify_committed_local
    g = CERT.certify_prepared_local
    assert f(s, L1 + L2, l) is meet(f(s, L1, l), f(s, L2, l))
    assert g(s, L1 + L2, l) is meet(g(s, L1, l), g(s, L2, l))


def check_laws(cases=10_000, seed=20261019):
    """Distributivity, matching, the prepared-vs-committed and commutativity
    conditions, projection idempotence and the oracles over ``cases`` random
    payload sets.  Returns the number of cases checked."""
    rng = random.Random(seed)
    for _ in range(cases):
        L = [random_payload(rng) for _ in range(rng.randint(0, 4))]
        L2 = [random_payload(rng) for _ in range(rng.randint(0, 3))]
        l = random_payload(rng)
        lp = random_payload(rng)
        g = CERT.certify_global(L, l)
        assert CERT.certify_global(L + L2, l) is meet(g, CERT.certify_global(L2, l))
        assert g is oracle_global(L, l)
        # global and local functions match
        local = all(CERT.certify_committed_local(s, [project(x, s, SM) for x in L], project(l, s, SM))
                    is COMMIT for s in SHARDS)
        assert (g is COMMIT) == local
        for s in SHARDS:
            f_s = CERT.certify_committed_local(s, L, l)
            g_s = CERT.certify_prepared_local(s, L, l)
            assert f_s is oracle_committed_local(s, L, l)
            assert CERT.certify_committed_local(s, L + L2, l) is meet(
                f_s, CERT.certify_committed_local(s, L2, l))
            assert CERT.certify_prepared_local(s, L + L2, l) is meet(
                g_s, CERT.certify_prepared_local(s, L2, l))
            assert g_s is oracle_prepared_local(s, L, l)
            # prepared check no weaker than committed check
            if g_s is COMMIT:
                assert f_s is COMMIT
            # commutativity condition
            if CERT.certify_prepared_local(s, [l], lp) is COMMIT:
                assert CERT.certify_committed_local(s, [lp], l) is COMMIT
            p = project(l, s, SM)
            assert project(p, s, SM) == p
    return cases


def test_laws_seeded_sweep():
    assert check_laws() == 10_000
