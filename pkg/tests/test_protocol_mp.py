import pytest

from ratc.certification import ABORT, COMMIT, EMPTY, Payload, project
from ratc.config_service import Configuration
from ratc.messages import (
    Accept, AcceptAck, ConfigChange, CsCas, CsGetLast, CsReply, DecisionClient, NewConfig,
    NewState, Prepare, PrepareAck, Probe, ProbeAck, ShardDecision,
)
from ratc.protocol_mp import (
    DECIDED, DEFER, DROP, FOLLOWER, HANDLED, LEADER, PREPARED, RECONFIGURING, PoolExhausted,
    Slot, compute_membership,
)

from conftest import MPCluster, sent

T1 = Payload.make({"s1:x": 0, "s2:y": 0}, {"s1:x": "a", "s2:y": "b"})


def feed(proc, src, msg, mid=0):
    proc.out = []
    return proc.deliver(src, msg, mid)


def test_certify_sends_prepare_to_each_leader(cluster):
    cluster.register("t1", T1)
    p = cluster["p1"]
    p.certify("t1", T1)
    prepares = sent(p, Prepare)
    assert sorted(d for d, _ in prepares) == ["p1", "p3"]
    for d, m in prepares:
        s = "s1" if d == "p1" else "s2"
        assert m.payload == project(T1, s, cluster.shard_map)


def test_single_shard_certify(cluster):
    l = Payload.make({"s2:y": 0})
    cluster.register("t", l)
    cluster["p1"].certify("t", l)
    assert [d for d, _ in sent(cluster["p1"], Prepare)] == ["p3"]


def test_prepare_fresh_slot(cluster):
    leader = cluster["p1"]
    l = Payload.make({"s1:x": 0}, {"s1:x": "a"})
    assert feed(leader, "p9", Prepare("t1", l)) == HANDLED
    [(dst, ack)] = sent(leader, PrepareAck)
    assert dst == "p9" and ack == PrepareAck(1, "s1", 1, "t1", l, COMMIT)
    assert leader.log[1] == Slot("t1", l, COMMIT, None, PREPARED) and leader.next == 1


def test_duplicate_prepare_is_idempotent(cluster):
    leader = cluster["p1"]
    l = Payload.make({"s1:x": 0}, {"s1:x": "a"})
    feed(leader, "p9", Prepare("t1", l))
    first = sent(leader, PrepareAck)
    state = leader.snapshot()
    feed(leader, "p8", Prepare("t1", None))
    assert [m for _, m in sent(leader, PrepareAck)] == [m for _, m in first]
    assert leader.snapshot() == state


def test_prepare_without_payload_aborts(cluster):
    leader = cluster["p1"]
    feed(leader, "p9", Prepare("t1", None))
    [(_, ack)] = sent(leader, PrepareAck)
    assert ack.vote is ABORT and ack.payload == EMPTY


def test_conflict_with_prepared_votes_abort(cluster):
    leader = cluster["p1"]
    feed(leader, "p9", Prepare("t1", Payload.make({"s1:x": 0}, {"s1:x": "a"})))
    feed(leader, "p9", Prepare("t2", Payload.make({"s1:x": 0})))
    [(_, ack)] = sent(leader, PrepareAck)
    assert ack.k == 2 and ack.vote is ABORT


def test_conflict_with_committed_votes_abort(cluster):
    leader = cluster["p1"]
    feed(leader, "p9", Prepare("t1", Payload.make({"s1:x": 0}, {"s1:x": "a"})))
    feed(leader, "p9", ShardDecision(1, 1, COMMIT))
    feed(leader, "p9", Prepare("t2", Payload.make({"s1:x": 0})))
    assert sent(leader, PrepareAck)[0][1].vote is ABORT
    feed(leader, "p9", Prepare("t3", Payload.make({"s1:x": 1})))
    assert sent(leader, PrepareAck)[0][1].vote is COMMIT


def test_prepare_deferred_when_not_leader(cluster):
    assert feed(cluster["p2"], "p9", Prepare("t1", EMPTY)) == DEFER
    assert cluster["p2"].pending


def test_prepare_ack_forwards_accept(cluster):
    cluster.register("t1", T1)
    coord = cluster["p3"]
    l = project(T1, "s1", cluster.shard_map)
    feed(coord, "p1", PrepareAck(1, "s1", 1, "t1", l, COMMIT))
    assert sent(coord) == [("p2", Accept(1, 1, "t1", l, COMMIT))]


def test_stale_prepare_ack_dropped(cluster):
    cluster.register("t1", T1)
    coord = cluster["p3"]
    coord.epoch["s1"] = 2
    assert feed(coord, "p1", PrepareAck(1, "s1", 1, "t1", EMPTY, COMMIT)) == DROP


def test_singleton_shard_decides_without_accepts():
    c = MPCluster({"s1": ["p1"], "s2": ["p2"]})
    l = Payload.make({"s1:x": 0, "s2:y": 0}, {"s1:x": "a"})
    c.register("t", l)
    coord = c["p1"]
    feed(coord, "p1", PrepareAck(1, "s1", 1, "t", project(l, "s1", c.shard_map), COMMIT))
    assert not sent(coord, Accept)
    feed(coord, "p2", PrepareAck(1, "s2", 1, "t", project(l, "s2", c.shard_map), COMMIT))
    assert sent(coord, DecisionClient) == [("c1", DecisionClient("t", COMMIT))]


def test_accept_fills_hole_and_acks(cluster):
    f = cluster["p2"]
    l = Payload.make({"s1:x": 0})
    assert feed(f, "p9", Accept(1, 3, "t1", l, COMMIT)) == HANDLED
    assert f.log[3] == Slot("t1", l, COMMIT, None, PREPARED) and 1 not in f.log
    assert sent(f) == [("p9", AcceptAck("s1", 1, 3, "t1", COMMIT))]


def test_duplicate_accept_still_acks(cluster):
    f = cluster["p2"]
    l = Payload.make({"s1:x": 0})
    feed(f, "p9", Accept(1, 1, "t1", l, COMMIT))
    state = f.snapshot()
    feed(f, "p8", Accept(1, 1, "t1", l, COMMIT))
    assert f.snapshot() == state and len(sent(f, AcceptAck)) == 1


def test_old_epoch_accept_never_acked(cluster):
    f = cluster["p2"]
    f.epoch["s1"] = 2
    assert feed(f, "p9", Accept(1, 1, "t1", EMPTY, COMMIT)) == DROP
    assert not sent(f)


def decide_flow(c):
    c.register("t1", T1)
    coord = c["p1"]
    for s, leader, follower in (("s1", "p1", "p2"), ("s2", "p3", "p4")):
        l = project(T1, s, c.shard_map)
        feed(coord, leader, PrepareAck(1, s, 1, "t1", l, COMMIT if s == "s1" else c._vote2))
        feed(coord, follower, AcceptAck(s, 1, 1, "t1", COMMIT if s == "s1" else c._vote2))
    return coord


@pytest.mark.parametrize("vote2,want", [(COMMIT, COMMIT), (ABORT, ABORT)])
def test_accept_acks_complete_decision(vote2, want):
    c = MPCluster()
    c._vote2 = vote2
    coord = decide_flow(c)
    out = sent(coord)
    assert ("c1", DecisionClient("t1", want)) in out
    decisions = [(d, m) for d, m in out if isinstance(m, ShardDecision)]
    assert sorted(d for d, _ in decisions) == ["p1", "p2", "p3", "p4"]
    assert {m.decision for _, m in decisions} == {want}


def test_acks_from_overtaken_epoch_do_not_count(cluster):
    cluster.register("t1", T1)
    coord = cluster["p1"]
    l1, l2 = (project(T1, s, cluster.shard_map) for s in ("s1", "s2"))
    feed(coord, "p1", PrepareAck(1, "s1", 1, "t1", l1, COMMIT))
    feed(coord, "p2", AcceptAck("s1", 1, 1, "t1", COMMIT))
    feed(coord, "p3", PrepareAck(1, "s2", 1, "t1", l2, COMMIT))
    feed(coord, "cs", ConfigChange("s2", 2, frozenset({"p4", "p6"}), "p4"))
    feed(coord, "p4", AcceptAck("s2", 1, 1, "t1", COMMIT))
    assert not sent(coord, DecisionClient)


def test_decision_applies_and_is_idempotent(cluster):
    f = cluster["p2"]
    feed(f, "p9", Accept(1, 1, "t1", EMPTY, COMMIT))
    feed(f, "p9", ShardDecision(1, 1, COMMIT))
    assert f.log[1].phase is DECIDED and f.log[1].dec is COMMIT
    state = f.snapshot()
    feed(f, "p9", ShardDecision(1, 1, COMMIT))
    assert f.snapshot() == state


def test_decision_deferred_while_reconfiguring(cluster):
    f = cluster["p2"]
    feed(f, "p9", Probe(2))
    assert f.status is RECONFIGURING
    assert feed(f, "p9", ShardDecision(1, 1, COMMIT)) == DEFER


def test_reconfigure_probes_current_members(cluster):
    r = cluster["p3"]
    r.out = []
    assert r.reconfigure("s1")
    assert sent(r) == [("cs", CsGetLast("s1"))]
    assert not r.reconfigure("s1")     # already probing
    feed(r, "cs", CsReply("get_last", "s1", Configuration(1, frozenset({"p1", "p2"}), "p1")))
    assert sorted(d for d, m in sent(r, Probe)) == ["p1", "p2"] and r.recon_epoch == 2


def test_probe_replies_with_initialized_flag():
    c = MPCluster(pools={"s1": ["p5"], "s2": []})
    feed(c["p2"], "p9", Probe(2))
    assert sent(c["p2"]) == [("p9", ProbeAck(True, 2, "s1"))]
    feed(c["p5"], "p9", Probe(2))
    assert sent(c["p5"]) == [("p9", ProbeAck(False, 2, "s1"))]
    assert feed(c["p2"], "p9", Probe(1)) == DROP


def test_probe_ack_true_installs_via_cas():
    c = MPCluster(pools={"s1": ["p5"], "s2": []})
    r = c["p3"]
    r.reconfigure("s1")
    feed(r, "cs", CsReply("get_last", "s1", Configuration(1, frozenset({"p1", "p2"}), "p1")))
    feed(r, "p2", ProbeAck(True, 2, "s1"))
    [(dst, cas)] = sent(r)
    assert dst == "cs" and isinstance(cas, CsCas)
    assert cas.config == Configuration(2, frozenset({"p2", "p5"}), "p2") and cas.expected == 1
    feed(r, "cs", CsReply("cas", "s1", True))
    assert sent(r) == [("p2", NewConfig(2, frozenset({"p2", "p5"})))]


def test_lost_cas_sends_nothing():
    c = MPCluster(pools={"s1": ["p5"], "s2": []})
    r = c["p3"]
    r.reconfigure("s1")
    feed(r, "cs", CsReply("get_last", "s1", Configuration(1, frozenset({"p1", "p2"}), "p1")))
    feed(r, "p2", ProbeAck(True, 2, "s1"))
    feed(r, "cs", CsReply("cas", "s1", False))
    assert not sent(r, NewConfig)


def test_descent_enabled_only_after_false_ack():
    c = MPCluster(pools={"s1": ["p5"], "s2": []})
    r = c["p3"]
    r.reconfigure("s1")
    feed(r, "cs", CsReply("get_last", "s1", Configuration(3, frozenset({"p5"}), "p5")))
    assert r.enabled_actions() == []
    feed(r, "p5", ProbeAck(False, 4, "s1"))
    assert r.enabled_actions() == ["descend"]
    r.out = []
    assert r.perform("descend") and r.probed_epoch == 2


def test_new_config_promotes_and_ships_state(cluster):
    f = cluster["p2"]
    feed(f, "p9", Accept(1, 1, "t1", EMPTY, COMMIT))
    feed(f, "p9", Accept(1, 3, "t3", EMPTY, ABORT))
    feed(f, "p9", Probe(2))
    feed(f, "p9", NewConfig(2, frozenset({"p2", "p5"})))
    assert f.status is LEADER and f.epoch["s1"] == 2 and f.next == 3
    [(dst, ns)] = sent(f)
    assert dst == "p5" and isinstance(ns, NewState) and [k for k, _ in ns.log] == [1, 3]


def test_new_config_with_empty_log(cluster):
    f = cluster["p2"]
    feed(f, "p9", Probe(2))
    feed(f, "p9", NewConfig(2, frozenset({"p2"})))
    assert f.next == 0 and not sent(f)


def test_new_state_initializes_fresh_process():
    c = MPCluster(pools={"s1": ["p5"], "s2": []})
    fresh = c["p5"]
    assert not fresh.initialized
    log = ((1, Slot("t1", EMPTY, COMMIT, None, PREPARED)),)
    feed(fresh, "p2", NewState(2, frozenset({"p2", "p5"}), log))
    assert fresh.initialized and fresh.status is FOLLOWER and fresh.leader["s1"] == "p2"
    assert dict(fresh.log) == dict(log)


def test_new_state_replaces_log_and_rejects_stale(cluster):
    f = cluster["p2"]
    feed(f, "p9", Accept(1, 1, "lost", EMPTY, COMMIT))
    feed(f, "p9", Probe(3))
    assert feed(f, "p1", NewState(2, frozenset({"p1", "p2"}), ())) == DROP
    feed(f, "p4", NewState(3, frozenset({"p4", "p2"}), ()))
    assert f.log == {} and f.epoch["s1"] == 3


def test_config_change_guards(cluster):
    p = cluster["p1"]
    assert feed(p, "cs", ConfigChange("s2", 2, frozenset({"p4"}), "p4")) == HANDLED
    assert p.leader["s2"] == "p4"
    assert feed(p, "cs", ConfigChange("s2", 2, frozenset({"p3"}), "p3")) == DROP
    assert feed(p, "cs", ConfigChange("s1", 5, frozenset({"p2"}), "p2")) == DROP


def test_retry_sends_bottom_prepares(cluster):
    cluster.register("t1", T1)
    f = cluster["p2"]
    feed(f, "p9", Accept(1, 1, "t1", project(T1, "s1", cluster.shard_map), COMMIT))
    f.out = []
    assert f.retry(1)
    assert sorted((d, m) for d, m in sent(f)) == [("p1", Prepare("t1", None)), ("p3", Prepare("t1", None))]
    assert not f.retry(7)


def test_compute_membership():
    assert compute_membership({"a", "b"}, "a", [], 2) == (frozenset({"a", "b"}), [])
    assert compute_membership({"a"}, "a", ["f1", "f2"], 2) == (frozenset({"a", "f1"}), ["f1"])
    with pytest.raises(PoolExhausted):
        compute_membership({"a"}, "a", [], 3)
    with pytest.raises(ValueError):
        compute_membership({"a"}, "z", [], 1)
