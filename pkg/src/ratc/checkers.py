"""Offline checks over simulation traces.

Three families:

* `check_correct`: does the committed part of the history have a legal
  linearization under the certification function?
* `check_invariants`: the protocol invariants (1-12 for every model, 13 for
  the RDMA variants), each violation carrying the record indices that
  witness it.
* `check_tcsll`: the low-level vote/position constraints, evaluated on an
  assignment extracted from the trace plus the vote-time provenance the
  leaders recorded.

All functions are pure over a `Trace`.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

from .certification import (
    ABORT, COMMIT, EMPTY, Serializability, ShardMap, meet, project, weaker_or_equal,
)
from .config_service import GlobalConfiguration
from .messages import (
    Accept, AcceptAck, DecisionClient, NewState, PrepareAck, ProbeAck, ShardDecision,
)
from .protocol_mp import DECIDED
from .trace import Trace

INVARIANTS = ("1", "2", "3", "4a", "4b", "5", "6", "7", "8", "9", "10", "11a", "11b",
              "12a", "12b", "13")
CHECKS = ("invariants", "tcsll", "correctness")


@dataclass
class Violation:
    check: str
    text: str
    witnesses: tuple = ()       # record indices

    def window(self) -> tuple:
        if not self.witnesses:
            return ()
        return (min(self.witnesses), max(self.witnesses))


@dataclass
class Verdict:
    name: str
    ok: bool
    violations: list = field(default_factory=list)
    skipped: bool = False
    detail: str = ""

    @property
    def status(self) -> str:
        if self.skipped:
            return "skipped"
        return "pass" if self.ok else "FAIL"


def _verdict(name, violations, detail="") -> Verdict:
    return Verdict(name, not violations, list(violations), detail=detail)


# -- history ------------------------------------------------------------------

@dataclass(frozen=True)
class Action:
    kind: str           # "certify" | "decide"
    t: str
    value: object       # payload or decision
    index: int          # position in the trace


@dataclass
class History:
    actions: list

    def certified(self) -> dict:
        return {a.t: a for a in self.actions if a.kind == "certify"}

    def decided(self) -> dict:
        return {a.t: a for a in self.actions if a.kind == "decide"}

    def committed(self) -> list:
        return [t for t, a in self.decided().items() if a.value is COMMIT]

    def precedes_rt(self, t1, t2) -> bool:
        """decide(t1) happens before certify(t2)."""
        d = self.decided().get(t1)
        c = self.certified().get(t2)
        return d is not None and c is not None and d.index < c.index


def history_of(trace: Trace) -> History:
    """certify actions come from submissions, decide actions from the first
    DECISION_CLIENT a coordinator emits for the transaction."""
    out = []
    for i, r in enumerate(trace.records):
        if r["kind"] == "certify":
            out.append(Action("certify", r["data"]["t"], r["data"]["payload"], i))
        elif r["kind"] == "decide":
            out.append(Action("decide", r["data"]["t"], r["data"]["d"], i))
    return History(out)


def validate_history(h: History) -> list:
    errs = []
    seen, decided = set(), set()
    for a in h.actions:
        if a.kind == "certify":
            if a.t in seen:
                errs.append(Violation("history", f"{a.t} certified twice", (a.index,)))
            seen.add(a.t)
        else:
            if a.t not in seen:
                errs.append(Violation("history", f"decide({a.t}) without certify", (a.index,)))
            if a.t in decided:
                errs.append(Violation("history", f"{a.t} decided twice", (a.index,)))
            decided.add(a.t)
    return errs


def _committed_view(h: History):
    cert = h.certified()
    dec = h.decided()
    txns = sorted(t for t in h.committed() if t in cert)
    payloads = [cert[t].value for t in txns]
    before = [[dec[txns[j]].index < cert[txns[i]].index for j in range(len(txns))]
              for i in range(len(txns))]
    return txns, payloads, before


def find_linearization(h: History, certifier, bound: int = 10):
    """A legal order of the committed transactions, or None.

    Returns the string "skipped" when there are more than ``bound``
    committed transactions.  Serializability is distributive, so
    f(L, l) is the meet of pairwise checks; the search places transactions
    one at a time and memoizes dead sets of placed transactions.
    """
    txns, payloads, before = _committed_view(h)
    n = len(txns)
    if n > bound:
        return "skipped"
    ok_after = [0] * n      # bit j set: l_i certifies against {l_j}
    must_follow = [0] * n   # bit j set: t_j decided before t_i was certified
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if certifier.certify_global([payloads[j]], payloads[i]) is COMMIT:
                ok_after[i] |= 1 << j
            if before[i][j]:
                must_follow[i] |= 1 << j
    full = (1 << n) - 1
    dead = set()

    def search(placed, order):
        if placed == full:
            return order
        if placed in dead:
            return None
        for i in range(n):
            bit = 1 << i
            if placed & bit:
                continue
            if must_follow[i] & ~placed:
                continue
            if placed & ~ok_after[i]:
                continue
            found = search(placed | bit, order + [txns[i]])
            if found is not None:
                return found
        dead.add(placed)
        return None

    return search(0, [])


def naive_linearization(h: History, certifier):
    """Exhaustive oracle: try every permutation, check legality directly."""
    txns, payloads, before = _committed_view(h)
    n = len(txns)
    for perm in itertools.permutations(range(n)):
        pos = {i: x for x, i in enumerate(perm)}
        if any(before[i][j] and pos[j] > pos[i] for i in range(n) for j in range(n)):
            continue
        if all(certifier.certify_global([payloads[j] for j in perm[:x]], payloads[i]) is COMMIT
               for x, i in enumerate(perm)):
            return [txns[i] for i in perm]
    return None


def check_correct(h: History, certifier, bound: int = 10) -> Verdict:
    errs = validate_history(h)
    res = find_linearization(h, certifier, bound)
    if res == "skipped":
        return Verdict("correctness", not errs, errs, skipped=not errs,
                       detail=f"more than {bound} committed transactions")
    if res is None:
        errs.append(Violation("correctness", "no legal linearization of the committed transactions",
                              tuple(a.index for a in h.actions if a.t in set(h.committed()))))
        return _verdict("correctness", errs)
    return _verdict("correctness", errs, detail=("order " + " ".join(res)) if res else "nothing committed")


# -- trace digestion ----------------------------------------------------------

@dataclass(frozen=True)
class Accepted:
    """All followers of (shard, epoch) persisted this entry."""
    shard: str
    epoch: int
    k: int
    t: str
    payload: object
    vote: object
    index: int          # record at which the last follower acknowledged


class View:
    """Indexes over a trace shared by the checks."""

    def __init__(self, trace: Trace):
        self.trace = trace
        self.records = trace.records
        meta = trace.meta
        self.model = meta.get("model", "mp")
        self.rdma = self.model in ("rdma", "naive-rdma")
        self.proc_shard = meta.get("proc_shard", {})
        self.shards = tuple(meta.get("shards", ()))
        self.shard_map = ShardMap(shards=self.shards)
        self.certifier = Serializability(self.shard_map)
        self.configs = defaultdict(dict)        # s -> e -> (members, leader)
        boot = meta.get("bootstrap")
        if isinstance(boot, GlobalConfiguration):
            self._add_global(boot)
        elif boot:
            for s, c in boot.items():
                self.configs[s][c.epoch] = (c.members, c.leader)
        self.sends = {}             # mid -> record index
        self.snaps = defaultdict(list)   # pid -> [(index, State)]
        self.certified = {}
        for i, r in enumerate(self.records):
            kind, d = r["kind"], r["data"]
            if kind == "send":
                self.sends[d["id"]] = i
            elif kind == "cs" and d.get("config") is not None:
                cfg = d["config"]
                if isinstance(cfg, GlobalConfiguration):
                    self._add_global(cfg)
                else:
                    self.configs[d["key"]][cfg.epoch] = (cfg.members, cfg.leader)
            elif kind == "handle" and d.get("state") is not None:
                self.snaps[r["dst"]].append((i, d["state"]))
            elif kind == "invoke" and d.get("state") is not None:
                self.snaps[r["src"]].append((i, d["state"]))
            elif kind == "certify":
                self.certified[d["t"]] = d["payload"]
        self.prefixes = {}          # (e, s, k, t) -> leader prefix at PREPARE_ACK
        for i, r in enumerate(self.records):
            if r["kind"] == "send" and isinstance(r["data"]["msg"], PrepareAck):
                m = r["data"]["msg"]
                self.prefixes.setdefault((m.epoch, m.shard, m.k, m.t),
                                         (i, (r["data"].get("meta") or {}).get("prefix", ())))
        self.accepted = self._accepted()

    def _add_global(self, cfg):
        for s, ms in cfg.members:
            self.configs[s][cfg.epoch] = (ms, cfg.leader_of(s))

    def followers(self, s, e):
        c = self.configs.get(s, {}).get(e)
        if c is None:
            return None
        return c[0] - {c[1]}

    def members(self, s, e):
        c = self.configs.get(s, {}).get(e)
        return None if c is None else c[0]

    def shard_of_proc(self, pid):
        return self.proc_shard.get(pid)

    def _accepted(self) -> list:
        acks = defaultdict(set)
        first = {}
        out = []
        done = set()

        def consider(key, f, i):
            s, e = key[0], key[1]
            fol = self.followers(s, e)
            if fol is None or key in done:
                return
            if f is not None:
                acks[key].add(f)
            if acks[key] >= fol:
                done.add(key)
                out.append(Accepted(*key, index=i))

        for i, r in enumerate(self.records):
            kind, d = r["kind"], r["data"]
            if kind == "send":
                m = d["msg"]
                if isinstance(m, PrepareAck):
                    key = (m.shard, m.epoch, m.k, m.t, m.payload, m.vote)
                    if self.followers(m.shard, m.epoch) == frozenset():
                        consider(key, None, i)
                elif isinstance(m, AcceptAck) and not self.rdma:
                    payload = (d.get("meta") or {}).get("payload")
                    consider((m.shard, m.epoch, m.k, m.t, payload, m.vote), r["src"], i)
                elif isinstance(m, Accept) and d["chan"] == "rdma":
                    meta = d["meta"]
                    first[d["id"]] = (meta["shard"], meta["prepare_epoch"], m.k, m.t, m.payload, m.vote)
            elif kind == "land" and d["accepted"] and d["id"] in first:
                consider(first[d["id"]], r["dst"], i)
        return out


def _arrays(items, k):
    """txn / vote / payload arrays of slots 1..k (None marks a hole)."""
    txn, vote, pay = [None] * k, [None] * k, [None] * k
    for j, slot in items:
        if 1 <= j <= k:
            txn[j - 1], vote[j - 1], pay[j - 1] = slot.txn, slot.vote, slot.payload
    return txn, vote, pay


def _leader_arrays(prefix, k):
    txn, vote, pay = [None] * k, [None] * k, [None] * k
    for j, t, v, l in prefix:
        if 1 <= j <= k:
            txn[j - 1], vote[j - 1], pay[j - 1] = t, v, l
    return txn, vote, pay


def _length(seq) -> int:
    for i in range(len(seq), 0, -1):
        if seq[i - 1] is not None:
            return i
    return 0


def prefix_holes(beta, alpha) -> bool:
    """beta agrees with alpha on every non-hole entry and both end at the
    same last non-hole position."""
    if _length(beta) != _length(alpha):
        return False
    return all(b is None or (i < len(alpha) and b == alpha[i]) for i, b in enumerate(beta))


def _prefix_ok(state_log, leader_prefix, k) -> bool:
    mine = _arrays(state_log, k)
    theirs = _leader_arrays(leader_prefix, k)
    return all(prefix_holes(a, b) for a, b in zip(mine, theirs))


# -- invariants ---------------------------------------------------------------

def check_invariants(trace: Trace, view: Optional[View] = None) -> list:
    v = view or View(trace)
    found = defaultdict(list)
    _inv1(v, found)
    _inv2(v, found)
    _inv3(v, found)
    for x in unique_decision_violations(trace):
        found[x.check].append(x)
    _inv5(v, found)
    _inv6_9(v, found)
    _state_invariants(v, found)
    _inv11(v, found)
    if v.rdma:
        _inv13(v, found)
    names = INVARIANTS if v.rdma else INVARIANTS[:-1]
    return [_verdict(f"invariant {n}", found.get(n, [])) for n in names]


def _snap_before(v, pid, index):
    """Snapshots of pid from the last one at or before ``index`` onward."""
    snaps = v.snaps.get(pid, [])
    lo = 0
    for x, (i, _) in enumerate(snaps):
        if i <= index:
            lo = x
        else:
            break
    return snaps[lo:]


def _inv1(v, found):
    """After a follower persists ACCEPT(e, k, ...) its first k slots match
    the leader's at PREPARE_ACK time, up to holes, while it stays at e."""
    events = []
    for i, r in enumerate(v.records):
        d = r["data"]
        if r["kind"] == "send" and isinstance(d["msg"], AcceptAck) and not v.rdma:
            m = d["msg"]
            events.append((i, r["src"], m.shard, m.epoch, m.k, m.t))
        elif r["kind"] == "handle" and v.rdma and d.get("state") is not None:
            si = v.sends.get(d["id"])
            if si is None:
                continue
            sr = v.records[si]
            m = sr["data"]["msg"]
            if isinstance(m, Accept) and sr["data"]["chan"] == "rdma":
                meta = sr["data"]["meta"]
                if d.get("pre_epoch") == meta["prepare_epoch"]:
                    events.append((i, r["dst"], meta["shard"], meta["prepare_epoch"], m.k, m.t))
    for i, pid, s, e, k, t in events:
        ref = v.prefixes.get((e, s, k, t))
        if ref is None:
            continue
        pi, prefix = ref
        for si, st in _snap_before(v, pid, i):
            if st.epoch != e:
                if si > i:
                    break
                continue
            if not _prefix_ok(st.log, prefix, k):
                found["1"].append(Violation(
                    "1", f"{pid} at epoch {e} diverges from leader prefix of slot {k} ({t})",
                    (pi, i, si)))
                break


def _inv2(v, found):
    """Accepted slots persist, as a hole-prefix, into every higher epoch."""
    by_shard = defaultdict(list)
    for pid, snaps in v.snaps.items():
        for si, st in snaps:
            by_shard[st.shard].append((si, pid, st))
    for a in v.accepted:
        ref = v.prefixes.get((a.epoch, a.shard, a.k, a.t))
        if ref is None:
            continue
        pi, prefix = ref
        last = {}
        for si, pid, st in by_shard[a.shard]:
            if st.epoch <= a.epoch:
                continue
            if last.get(pid) is st.log:
                continue
            last[pid] = st.log
            if not _prefix_ok(st.log, prefix, a.k):
                found["2"].append(Violation(
                    "2", f"{a.t} accepted at {a.shard}/{a.epoch} slot {a.k} missing or altered "
                         f"at {pid} epoch {st.epoch}", (pi, a.index, si)))
                break


def _inv3(v, found):
    """No acknowledgement of an older epoch after answering a probe."""
    probed = {}     # pid -> (epoch, index)
    pending = {}
    for i, r in enumerate(v.records):
        kind, d = r["kind"], r["data"]
        if kind == "send" and isinstance(d["msg"], ProbeAck):
            e = d["msg"].epoch
            if r["src"] not in probed or probed[r["src"]][0] < e:
                probed[r["src"]] = (e, i)
            continue
        if kind == "send" and isinstance(d["msg"], AcceptAck) and not v.rdma:
            pid, ack_epoch = r["src"], d["msg"].epoch
        elif kind == "send" and isinstance(d["msg"], Accept) and d["chan"] == "rdma":
            pending[d["id"]] = d["meta"]["prepare_epoch"]
            continue
        elif kind == "land" and d["accepted"] and d["id"] in pending:
            pid, ack_epoch = r["dst"], pending[d["id"]]
        else:
            continue
        p = probed.get(pid)
        if p is not None and ack_epoch < p[0]:
            found["3"].append(Violation(
                "3", f"{pid} acknowledged an epoch-{ack_epoch} ACCEPT after PROBE_ACK({p[0]})",
                (p[1], i)))


def unique_decision_violations(trace: Trace) -> list:
    shard_dec = {}
    client_dec = {}
    out = []
    for i, r in enumerate(trace.records):
        if r["kind"] != "send":
            continue
        m = r["data"]["msg"]
        if isinstance(m, ShardDecision):
            meta = r["data"].get("meta") or {}
            key = (meta.get("shard"), m.k)
            prev = shard_dec.setdefault(key, (m.decision, i))
            if prev[0] is not m.decision:
                out.append(Violation("4a", f"slot {m.k} of {key[0]} decided both "
                                           f"{prev[0].value} and {m.decision.value}", (prev[1], i)))
        elif isinstance(m, DecisionClient):
            prev = client_dec.setdefault(m.t, (m.decision, i))
            if prev[0] is not m.decision:
                out.append(Violation("4b", f"{m.t} externalized as both {prev[0].value} "
                                           f"and {m.decision.value}", (prev[1], i)))
    return out


def check_unique_decisions(trace: Trace) -> Verdict:
    return _verdict("unique decisions", unique_decision_violations(trace))


def _inv5(v, found):
    """A member dropped by an epoch with an accepted entry never returns."""
    witness = {}
    for a in v.accepted:
        witness.setdefault((a.shard, a.epoch), a.index)
    for (s, e), idx in witness.items():
        epochs = v.configs.get(s, {})
        cur = v.members(s, e)
        earlier = set()
        for x, (ms, _) in epochs.items():
            if x < e:
                earlier |= ms
        dropped = earlier - cur
        for x, (ms, _) in sorted(epochs.items()):
            if x > e and dropped & ms:
                back = sorted(dropped & ms)
                found["5"].append(Violation(
                    "5", f"{', '.join(back)} left {s} at epoch {e} but rejoined at epoch {x}", (idx,)))


def _inv6_9(v, found):
    """ACCEPTs for one (epoch, slot) agree; one transaction, one slot per epoch."""
    by_slot = {}
    by_txn = {}
    for i, r in enumerate(v.records):
        if r["kind"] != "send" or not isinstance(r["data"]["msg"], Accept):
            continue
        m = r["data"]["msg"]
        s = v.shard_of_proc(r["dst"])
        e = m.epoch if m.epoch is not None else r["data"]["meta"]["prepare_epoch"]
        content = (m.t, m.payload, m.vote)
        prev = by_slot.setdefault((s, e, m.k), (content, i))
        if prev[0] != content:
            found["6"].append(Violation(
                "6", f"two different ACCEPTs for {s} epoch {e} slot {m.k}", (prev[1], i)))
        prev = by_txn.setdefault((s, e, m.t), (m.k, i))
        if prev[0] != m.k:
            found["9"].append(Violation(
                "9", f"{m.t} sent to {s} at epoch {e} in slots {prev[0]} and {m.k}", (prev[1], i)))


def _state_invariants(v, found):
    """Invariants about single snapshots: 7, 8, 10, 12a, 12b."""
    decisions = defaultdict(lambda: None)    # (s, k, d) -> lowest epoch sent so far
    snaps = []
    for pid, ss in v.snaps.items():
        for si, st in ss:
            snaps.append((si, pid, st))
    snaps.sort(key=lambda x: x[0])
    events = []
    for i, r in enumerate(v.records):
        if r["kind"] == "send" and isinstance(r["data"]["msg"], ShardDecision):
            events.append((i, r))
    ev = 0
    checked_slots = set()
    last_log = {}
    for si, pid, st in snaps:
        while ev < len(events) and events[ev][0] < si:
            i, r = events[ev]
            m = r["data"]["msg"]
            meta = r["data"].get("meta") or {}
            e = m.epoch if m.epoch is not None else meta.get("epoch")
            key = (meta.get("shard"), m.k, m.decision)
            if decisions[key] is None or e < decisions[key][0]:
                decisions[key] = (e, i)
            ev += 1
        if st.new_epoch < st.epoch:
            found["8"].append(Violation("8", f"{pid} has new_epoch {st.new_epoch} < epoch {st.epoch}", (si,)))
        if last_log.get(pid) is st.log:
            continue
        last_log[pid] = st.log
        txns = [slot.txn for _, slot in st.log if slot.txn is not None]
        if len(txns) != len(set(txns)):
            dup = sorted({t for t in txns if txns.count(t) > 1})
            found["10"].append(Violation("10", f"{pid} holds {', '.join(dup)} in two slots", (si,)))
        for k, slot in st.log:
            if (st.shard, k, slot) not in checked_slots:
                checked_slots.add((st.shard, k, slot))
                _check_payload(v, found, pid, st.shard, k, slot, si)
                if slot.phase is DECIDED and slot.dec is COMMIT and slot.vote is not COMMIT:
                    found["12b"].append(Violation(
                        "12b", f"{pid} slot {k} decided COMMIT with vote {slot.vote}", (si,)))
            if slot.phase is DECIDED:
                sent = decisions[(st.shard, k, slot.dec)]
                if sent is None or sent[0] > st.epoch:
                    found["12a"].append(Violation(
                        "12a", f"{pid} slot {k} decided {slot.dec.value} at epoch {st.epoch} "
                               f"without a matching DECISION", (si,)))


def _check_payload(v, found, pid, s, k, slot, si):
    if slot.vote is None or slot.txn is None:
        return
    l = v.certified.get(slot.txn)
    if l is None:
        return
    mine = project(l, s, v.shard_map)
    if slot.vote is COMMIT and slot.payload != mine:
        found["7"].append(Violation("7", f"{pid} slot {k}: COMMIT vote on a payload that is not "
                                         f"{slot.txn}'s projection", (si,)))
    elif slot.vote is ABORT and slot.payload not in (mine, EMPTY):
        found["7"].append(Violation("7", f"{pid} slot {k}: ABORT vote on a foreign payload", (si,)))


def _inv11(v, found):
    by_slot = {}
    by_txn = {}
    for a in v.accepted:
        prev = by_slot.setdefault((a.shard, a.k), a)
        if (prev.t, prev.payload, prev.vote) != (a.t, a.payload, a.vote):
            found["11a"].append(Violation(
                "11a", f"{a.shard} slot {a.k} accepted as {prev.t}@{prev.epoch} and {a.t}@{a.epoch}",
                (prev.index, a.index)))
        prev = by_txn.setdefault((a.shard, a.t), a)
        if (prev.k, prev.payload, prev.vote) != (a.k, a.payload, a.vote):
            found["11b"].append(Violation(
                "11b", f"{a.t} accepted at {a.shard} as slot {prev.k}@{prev.epoch} and "
                       f"slot {a.k}@{a.epoch}", (prev.index, a.index)))


def _inv13(v, found):
    """Every delivered ACCEPT finds its receiver at the preparing epoch."""
    for i, r in enumerate(v.records):
        if r["kind"] != "handle" or r["data"].get("pre_epoch") is None:
            continue
        si = v.sends.get(r["data"]["id"])
        if si is None:
            continue
        sr = v.records[si]
        m = sr["data"]["msg"]
        if not isinstance(m, Accept):
            continue
        e = sr["data"]["meta"]["prepare_epoch"]
        if r["data"]["pre_epoch"] != e:
            found["13"].append(Violation(
                "13", f"{r['dst']} took ACCEPT for {m.t} (prepared at epoch {e}) "
                      f"while at epoch {r['data']['pre_epoch']}", (si, i)))


# -- TCS-LL -------------------------------------------------------------------

@dataclass
class TcsLlAssignment:
    decision: dict      # t -> global decision
    vote: dict          # (t, s) -> d_s[t]
    pos: dict           # (t, s) -> pos_s[t]
    pload: dict         # (t, s) -> pload_s[t]
    T: dict             # (t, s) -> frozenset
    P: dict             # (t, s) -> frozenset
    shards: dict        # t -> shards(t)
    certified: dict     # t -> payload
    rt: set             # (t1, t2): decide(t1) before certify(t2)
    where: dict = field(default_factory=dict)   # (t, s) -> record index
    conflicts: list = field(default_factory=list)


def extract_assignment(trace: Trace, view: Optional[View] = None) -> TcsLlAssignment:
    v = view or View(trace)
    h = history_of(trace)
    cert = h.certified()
    dec = h.decided()
    shards = {}
    for r in trace.records:
        if r["kind"] == "certify":
            shards[r["data"]["t"]] = r["data"]["shards"]
    prov = defaultdict(list)
    for r in trace.records:
        if r["kind"] == "provenance":
            d = r["data"]
            prov[(d["shard"], d["t"], d["k"])].append((d["epoch"], d["T"], d["P"]))
    a = TcsLlAssignment({t: x.value for t, x in dec.items()}, {}, {}, {}, {}, {},
                        shards, {t: x.value for t, x in cert.items()}, set())
    chosen = {}
    for acc in v.accepted:
        key = (acc.t, acc.shard)
        if key in a.pos:
            if (a.pos[key], a.pload[key], a.vote[key]) != (acc.k, acc.payload, acc.vote):
                a.conflicts.append(Violation(
                    "assignment", f"{acc.t} accepted differently at {acc.shard}",
                    (a.where[key], acc.index)))
            continue
        a.pos[key], a.pload[key], a.vote[key] = acc.k, acc.payload, acc.vote
        a.where[key] = acc.index
        cands = [p for p in prov.get((acc.shard, acc.t, acc.k), ()) if p[0] <= acc.epoch]
        if cands:
            chosen[key] = max(cands, key=lambda p: p[0])
    for key, (_, T, P) in chosen.items():
        s = key[1]
        a.T[key] = frozenset(t for t, _ in T)
        # an entry the leader saw prepared may later have been lost and
        # re-prepared elsewhere; only keep it if it was accepted at that slot
        a.P[key] = frozenset(t for t, j in P if a.pos.get((t, s)) == j)
    for t1, d in dec.items():
        for t2, c in cert.items():
            if d.index < c.index:
                a.rt.add((t1, t2))
    return a


def check_tcsll(trace: Trace, a: Optional[TcsLlAssignment] = None) -> Verdict:
    if a is None:
        a = extract_assignment(trace)
    out = list(a.conflicts)

    def at(t, s):
        return a.where.get((t, s), 0)

    shard_txns = defaultdict(list)
    for (t, s) in a.pos:
        shard_txns[s].append(t)

    # decision is the meet of the shard votes
    for t, d in sorted(a.decision.items()):
        votes = []
        for s in sorted(a.shards.get(t, ())):
            if (t, s) not in a.vote:
                out.append(Violation("tcsll decision", f"{t} decided without an accepted vote at {s}"))
                break
            votes.append(a.vote[(t, s)])
        else:
            m = COMMIT
            for x in votes:
                m = meet(m, x)
            if m is not d:
                out.append(Violation("tcsll decision", f"{t}: decision {d.value} is not the meet of votes",
                                     tuple(at(t, s) for s in a.shards[t])))

    # positions unique per shard
    for s, ts in sorted(shard_txns.items()):
        seen = {}
        for t in sorted(ts):
            p = a.pos[(t, s)]
            if p in seen:
                out.append(Violation("tcsll unique-pos", f"{seen[p]} and {t} share position {p} at {s}",
                                     (at(seen[p], s), at(t, s))))
            seen.setdefault(p, t)

    cert = Serializability(ShardMap(shards=sorted({s for _, s in a.pos})))
    for (t, s) in sorted(a.pos):
        l = a.certified.get(t)
        if l is None:
            continue
        mine = project(l, s, cert.shard_map)
        d_s, pl = a.vote[(t, s)], a.pload[(t, s)]
        # payload property
        if d_s is COMMIT and pl != mine or d_s is ABORT and pl not in (mine, EMPTY):
            out.append(Violation("tcsll payload", f"{t} at {s}: stored payload does not match its vote",
                                 (at(t, s),)))
        if (t, s) not in a.T:
            out.append(Violation("tcsll provenance", f"no vote provenance for {t} at {s}", (at(t, s),)))
            continue
        T, P = a.T[(t, s)], a.P[(t, s)]
        loads_T = [a.pload[(x, s)] for x in sorted(T) if (x, s) in a.pload]
        loads_P = [a.pload[(x, s)] for x in sorted(P)]
        bound = meet(cert.certify_committed_local(s, loads_T, pl), cert.certify_prepared_local(s, loads_P, pl))
        if not weaker_or_equal(d_s, bound):
            out.append(Violation("tcsll vote-bound", f"{t} at {s}: vote {d_s.value} exceeds what "
                                 f"T/P allow ({bound.value})", (at(t, s),)))
        below = {x for x in shard_txns[s] if a.pos[(x, s)] < a.pos[(t, s)]}
        expect_T = {x for x in below if a.decision.get(x) is COMMIT} - P
        if T != expect_T:
            out.append(Violation("tcsll T-composition", f"{t} at {s}: T = {sorted(T)} but expected "
                                 f"{sorted(expect_T)}", (at(t, s),)))
        allowed_P = {x for x in below if a.vote[(x, s)] is COMMIT}
        if not P <= allowed_P:
            out.append(Violation("tcsll P-inclusion", f"{t} at {s}: P has {sorted(P - allowed_P)} "
                                 f"outside earlier COMMIT votes", (at(t, s),)))

    # real-time order respected by positions
    for (t1, t2) in sorted(a.rt):
        for s in sorted(set(a.shards.get(t1, ())) & set(a.shards.get(t2, ()))):
            if (t1, s) in a.pos and (t2, s) in a.pos and a.pos[(t1, s)] >= a.pos[(t2, s)]:
                out.append(Violation("tcsll real-time", f"{t1} decided before {t2} was certified, "
                                     f"yet {t2} sits before it at {s}", (at(t1, s), at(t2, s))))

    # acyclicity of real-time plus decision dependencies
    edges = defaultdict(set)
    for t1, t2 in a.rt:
        edges[t1].add(t2)
    for (t, s) in a.pos:
        if (t, s) not in a.T:
            continue
        for x in a.T[(t, s)]:
            edges[x].add(t)
        for x in shard_txns[s]:
            if (a.pos[(x, s)] < a.pos[(t, s)] and a.vote[(x, s)] is COMMIT
                    and a.decision.get(x) is ABORT and x not in a.P[(t, s)]):
                edges[x].add(t)
    cycle = _find_cycle(edges)
    if cycle:
        out.append(Violation("tcsll acyclic", "dependency cycle " + " -> ".join(cycle)))
    return _verdict("tcsll", out)


def _find_cycle(edges) -> Optional[list]:
    color = {}
    stack = []

    def visit(u):
        color[u] = 1
        stack.append(u)
        for w in sorted(edges.get(u, ())):
            c = color.get(w, 0)
            if c == 1:
                return stack[stack.index(w):] + [w]
            if c == 0:
                found = visit(w)
                if found:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for u in sorted(edges):
        if color.get(u, 0) == 0:
            found = visit(u)
            if found:
                return found
    return None


# -- progress -----------------------------------------------------------------

@dataclass
class Reconfiguration:
    pid: str
    started: int                    # simulator step of the reconfigure call
    epoch: Optional[int] = None
    introduced: Optional[int] = None
    activated: Optional[int] = None

    @property
    def to_introduce(self) -> Optional[int]:
        return None if self.introduced is None else self.introduced - self.started

    @property
    def to_activate(self) -> Optional[int]:
        return None if self.activated is None else self.activated - self.started


def _followers(cfg) -> set:
    if isinstance(cfg, GlobalConfiguration):
        return {p for s, ms in cfg.members for p in ms if p != cfg.leader_of(s)}
    return set(cfg.members) - {cfg.leader}


def reconfigurations(trace: Trace) -> list:
    """Accepted reconfigure calls with the step at which the resulting
    configuration reached the configuration service and the step at which
    its last follower processed NEW_STATE."""
    out, open_by = [], {}
    msgs = {}
    waiting = {}                    # (key, epoch) -> (Reconfiguration, followers left)
    for r in trace.records:
        kind, d = r["kind"], r["data"]
        if kind == "invoke" and d["action"] == "reconfigure" and d["ok"]:
            rc = Reconfiguration(r["src"], r["step"])
            out.append(rc)
            open_by[r["src"]] = rc
        elif kind == "cs" and d["config"] is not None:
            rc = open_by.pop(r["src"], None)
            if rc is not None:
                rc.epoch, rc.introduced = d["config"].epoch, r["step"]
                left = _followers(d["config"])
                if left:
                    waiting[(d["key"], rc.epoch)] = (rc, left)
                else:
                    rc.activated = r["step"]
        elif kind == "send" and isinstance(d["msg"], NewState):
            msgs[d["id"]] = d["msg"]
        elif kind == "handle" and d["outcome"] == "handled" and d["id"] in msgs:
            e = msgs[d["id"]].epoch
            for key, (rc, left) in list(waiting.items()):
                if key[1] == e and r["dst"] in left:
                    left.discard(r["dst"])
                    if not left:
                        rc.activated = r["step"]
                        del waiting[key]
    return out


def decision_steps(trace: Trace) -> dict:
    """Transaction -> simulator steps from certification to the first
    client decision (None if never decided)."""
    start, out = {}, {}
    for r in trace.records:
        if r["kind"] == "certify":
            start.setdefault(r["data"]["t"], r["step"])
            out.setdefault(r["data"]["t"], None)
        elif r["kind"] == "decide" and r["data"]["t"] in start:
            t = r["data"]["t"]
            if out.get(t) is None:
                out[t] = r["step"] - start[t]
    return out


# -- front door ---------------------------------------------------------------

def run_checks(trace: Trace, which: str = "all", oracle_bound: int = 10) -> list:
    view = View(trace)
    verdicts = []
    if which in ("all", "invariants"):
        verdicts += check_invariants(trace, view)
        verdicts.append(check_unique_decisions(trace))
    if which in ("all", "tcsll"):
        verdicts.append(check_tcsll(trace, extract_assignment(trace, view)))
    if which in ("all", "correctness"):
        verdicts.append(check_correct(history_of(trace), view.certifier, oracle_bound))
    return verdicts


def all_pass(verdicts) -> bool:
    return all(v.ok for v in verdicts)


def describe_record(r) -> str:
    d = r["data"]
    if r["kind"] in ("send", "handle", "land", "rdma_ack"):
        body = d.get("msg")
        if body is None:
            body = f"#{d.get('id')} {d.get('outcome', d.get('accepted', ''))}"
        else:
            body = f"#{d['id']} {body}"
    else:
        body = ", ".join(f"{k}={v}" for k, v in d.items() if k not in ("state", "meta"))
    return f"step {r['step']:>5} t={r['time']:<4} {r['kind']:<10} {r['src']} -> {r['dst']}: {body}"


def render(verdicts, trace: Optional[Trace] = None, limit: int = 5) -> str:
    lines = []
    for v in verdicts:
        line = f"{v.status:<7} {v.name}"
        if v.detail and v.ok:
            line += f"  ({v.detail})"
        lines.append(line)
        for x in v.violations[:limit]:
            lines.append(f"    {x.text}")
            if trace is not None and x.witnesses:
                lo, hi = x.window()
                lines.append(f"    window: records {lo}..{hi}")
                for i in sorted(set(x.witnesses)):
                    lines.append("      " + describe_record(trace.records[i]))
        if len(v.violations) > limit:
            lines.append(f"    ... {len(v.violations) - limit} more")
    return "\n".join(lines)
