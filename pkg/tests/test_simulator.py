from dataclasses import replace

import pytest

from ratc import checkers, scenarios
from ratc.certification import COMMIT
from ratc.simulator import (
    FaultPolicy, SimConfig, Simulator, Step, TxnSpec, Workload, count_delays, gen_workload,
    layout_for, run,
)
from ratc.trace import Trace

FUZZ = SimConfig(shards=3, replicas=2, pool=2, latency=(1, 3),
                 workload=Workload(generate=8, conflict_rate=0.3), faults=FaultPolicy())


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(replicas=0)
    with pytest.raises(ValueError):
        SimConfig(pool=-1)
    with pytest.raises(ValueError):
        SimConfig(model="tcp")


def test_layout_numbering():
    shards, members, pools = layout_for(SimConfig(shards=3, replicas=2, pool=2))
    assert members == {"s1": ["p1", "p2"], "s2": ["p3", "p4"], "s3": ["p5", "p6"]}
    assert pools == {"s1": ["p7", "p8"], "s2": ["p9", "p10"], "s3": ["p11", "p12"]}


def test_empty_workload():
    tr = run(SimConfig())
    assert not tr.of_kind("certify") and not tr.of_kind("decide")
    assert checkers.history_of(tr).actions == []


@pytest.mark.parametrize("model", ["mp", "rdma", "naive-rdma"])
def test_same_seed_same_bytes(model):
    cfg = replace(FUZZ, seed=11, model=model)
    assert run(cfg).dumps() == run(cfg).dumps()


def test_different_seeds_differ():
    assert run(replace(FUZZ, seed=1)).dumps() != run(replace(FUZZ, seed=2)).dumps()


def test_trace_round_trip():
    tr = run(replace(FUZZ, seed=5, model="rdma"))
    text = tr.dumps()
    again = Trace.loads(text)
    assert again.dumps() == text
    assert [r["kind"] for r in again.records] == [r["kind"] for r in tr.records]


@pytest.mark.parametrize("seed", range(5))
def test_fifo_per_channel(seed):
    tr = run(replace(FUZZ, seed=seed, latency=(1, 6)))
    sends, first_handle = {}, []
    seen = set()
    for r in tr.records:
        d = r["data"]
        if r["kind"] == "send" and d["chan"] == "net":
            sends[d["id"]] = (r["src"], r["dst"])
        elif r["kind"] == "handle" and d["id"] in sends and d["id"] not in seen:
            seen.add(d["id"])
            first_handle.append(d["id"])
    by_chan = {}
    for mid in first_handle:
        by_chan.setdefault(sends[mid], []).append(mid)
    for chan, mids in by_chan.items():
        assert mids == sorted(mids), chan


def test_reliable_delivery_between_live_processes():
    sim = Simulator(replace(FUZZ, seed=3))
    sim.run()
    for (chan, src, dst), q in sim.chans.items():
        if src not in sim.crashed and dst not in sim.crashed:
            assert not q, (chan, src, dst)


def test_crash_discards_incoming_and_silences():
    wl = Workload(txns=(TxnSpec("t1", "p3", "c1", (("s1:x", 0),), (("s1:x", "a"),)),))
    cfg = SimConfig(workload=wl, script=(Step("certify", ("t1",), at=0), Step("crash", ("p1",), at=0)))
    tr = run(cfg)
    assert not [r for r in tr.of_kind("send") if r["src"] == "p1"]
    assert not [r for r in tr.of_kind("handle") if r["dst"] == "p1"]
    assert tr.of_kind("end")[0]["data"]["undecided"] == ("t1",)


def test_crashed_coordinator_recovered_by_retry():
    wl = Workload(txns=(TxnSpec("t1", "p3", "c1", (("s1:x", 0),), (("s1:x", "a"),)),))
    script = (Step("hold", ("h",), opts=(("dst", "p3"), ("kind", "ACCEPT_ACK"))),
              Step("certify", ("t1",)), Step("crash", ("p3",)), Step("retry", ("p2", "t1")))
    tr = run(SimConfig(workload=wl, script=script))
    [dec] = tr.of_kind("decide")
    assert dec["src"] == "p2" and dec["data"]["d"] is COMMIT


def test_gen_workload_basics():
    assert gen_workload(0, 0.3, seed=1) == []
    specs = gen_workload(20, 0.5, seed=2, shards=3)
    assert len({s.t for s in specs}) == 20
    for s in specs:
        assert {o for o, _ in s.writes} <= {o for o, _ in s.reads}
        assert all(o.split(":")[0] in ("s1", "s2", "s3") for o, _ in s.reads)


def test_no_conflicts_all_commit():
    cfg = SimConfig(seed=4, workload=Workload(generate=10, conflict_rate=0.0))
    tr = run(cfg)
    ds = [r["data"]["d"] for r in tr.of_kind("decide")]
    assert len(ds) == 10 and set(ds) == {COMMIT}


def test_concurrent_conflicting_at_most_one_commits():
    both = (("s1:x", 0),), (("s1:x", "v"),)
    wl = Workload(txns=(TxnSpec("t1", "p1", "c1", *both), TxnSpec("t2", "p3", "c2", *both)))
    for seed in range(10):
        cfg = SimConfig(seed=seed, latency=(1, 3), workload=wl,
                        script=(Step("certify", ("t1",), at=0), Step("certify", ("t2",), at=0)))
        ds = [r["data"]["d"] for r in run(cfg).of_kind("decide")]
        assert len(ds) == 2 and ds.count(COMMIT) <= 1


def test_rdma_full_buffer_path_still_decides():
    cfg = replace(FUZZ, seed=9, model="rdma", rdma_capacity=1, faults=None)
    tr = run(cfg)
    assert len(tr.of_kind("decide")) == 8
    assert checkers.all_pass(checkers.run_checks(tr))


def test_delay_counts_fig2a():
    tr = run(scenarios.builtin("fig2a"))
    assert count_delays(tr, "t1") == 5
    assert count_delays(tr, "t2") == 4
    assert count_delays(tr, "nope") is None


def test_delay_single_process_topology():
    wl = Workload(txns=(TxnSpec("t1", "p1", "p1", (("s1:x", 0),), (("s1:x", "a"),)),))
    tr = run(SimConfig(shards=1, replicas=1, pool=0, workload=wl, script=(Step("certify", ("t1",)),)))
    # everything is local: no network hop at all
    assert count_delays(tr, "t1") == 0


def test_max_steps_reported():
    tr = run(replace(FUZZ, seed=1, max_steps=10))
    assert tr.of_kind("end")[0]["data"]["reason"] == "max_steps"
