"""Message-passing atomic commit with per-shard reconfiguration.

Each `Replica` is a state machine stepped by the simulator.  Incoming
messages go through `deliver`; local calls (certify, retry, reconfigure)
are methods.  Outgoing messages and bookkeeping notes accumulate in
``self.out`` and are drained by the caller after every step.

Guarded delivery: a handler returns HANDLED, DEFER (guard false for now,
park the message) or DROP (guard can never become true again).  Parked
messages are retried after every state change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Optional

from .certification import ABORT, COMMIT, EMPTY, Certifier, Decision, Payload, meet, project
from .config_service import Configuration
from .messages import (
    Accept, AcceptAck, ConfigChange, CsCas, CsGet, CsGetLast, CsReply, DecisionClient,
    NewConfig, NewState, Prepare, PrepareAck, Probe, ProbeAck, ShardDecision,
)


class Status(str, Enum):
    LEADER = "LEADER"
    FOLLOWER = "FOLLOWER"
    RECONFIGURING = "RECONFIGURING"


class Phase(str, Enum):
    START = "START"
    PREPARED = "PREPARED"
    DECIDED = "DECIDED"


LEADER, FOLLOWER, RECONFIGURING = Status.LEADER, Status.FOLLOWER, Status.RECONFIGURING
PREPARED, DECIDED = Phase.PREPARED, Phase.DECIDED

HANDLED, DEFER, DROP = "handled", "deferred", "dropped"


@dataclass(frozen=True)
class Slot:
    txn: Optional[str]
    payload: Optional[Payload]
    vote: Optional[Decision]
    dec: Optional[Decision]
    phase: Phase


class State(NamedTuple):
    """What checkers see of a replica after each step."""
    shard: str
    epoch: int
    new_epoch: int
    status: Status
    initialized: bool
    next: int
    log: tuple          # ((k, Slot), ...) sorted by k


@dataclass(frozen=True)
class TxnInfo:
    payload: Payload
    shards: frozenset
    client: str


class PoolExhausted(RuntimeError):
    pass


class FreshPool:
    """Never-used processes per shard, handed out to reconfigurations."""

    def __init__(self, pools: dict):
        self.free = {s: list(ps) for s, ps in pools.items()}

    def available(self, shard: str) -> list:
        return list(self.free.get(shard, ()))

    def consume(self, shard: str, pids) -> None:
        for p in pids:
            self.free[shard].remove(p)


def compute_membership(responders, new_leader: str, pool, target_size: int,
                       initialized=frozenset()) -> tuple:
    """Pick ``target_size`` members: the new leader, other probe responders
    (initialized ones first), then fresh processes.

    Returns ``(members, fresh_used)``.
    """
    if new_leader not in responders:
        raise ValueError("new leader must have answered the probe")
    chosen = [new_leader]
    others = sorted(set(responders) - {new_leader}, key=lambda p: (p not in initialized, p))
    for p in others:
        if len(chosen) == target_size:
            break
        chosen.append(p)
    fresh = []
    for p in sorted(pool):
        if len(chosen) == target_size:
            break
        if p not in chosen:
            chosen.append(p)
            fresh.append(p)
    if len(chosen) < target_size:
        raise PoolExhausted(f"need {target_size} members, only {len(chosen)} available")
    return frozenset(chosen), fresh


@dataclass
class CoordState:
    shards: frozenset
    client: str
    prepared: dict = field(default_factory=dict)    # (s, e) -> (k, vote)
    followers: dict = field(default_factory=dict)   # (s, e) -> followers ACCEPT went to
    acks: dict = field(default_factory=dict)        # (s, e) -> {follower: (k, vote)}
    done: bool = False


class Replica:
    """Behaviour shared by every protocol variant."""

    def __init__(self, pid: str, shard: str, certifier: Certifier, registry: dict,
                 pool: FreshPool, target_size: int):
        self.pid = pid
        self.s0 = shard
        self.certifier = certifier
        self.registry = registry
        self.pool = pool
        self.target_size = target_size
        self.status = FOLLOWER
        self.initialized = False
        self.new_epoch = 0
        self.log: dict = {}
        self.next = 0
        self.coord: dict = {}
        self.pending: list = []
        self.out: list = []
        self.cs_wait = None
        self._where: dict = {}
        self._log_cache = None
        self._dirty: set = set()
        self._mark = 0
        self.crashed = False

    # -- plumbing -----------------------------------------------------------

    def send(self, dst, msg, meta=None):
        self.out.append(("send", dst, msg, meta, "net"))

    def send_rdma(self, dst, msg, meta=None):
        self.out.append(("send", dst, msg, meta, "rdma"))

    def note(self, *item):
        self.out.append(item)

    def own_epoch(self) -> int:
        raise NotImplementedError

    def snapshot(self) -> State:
        if self._log_cache is None:
            self._log_cache = tuple(sorted(self.log.items()))
        return State(self.s0, self.own_epoch(), self.new_epoch, self.status,
                     self.initialized, self.next, self._log_cache)

    def _write(self, k: int, slot: Slot) -> None:
        old = self.log.get(k)
        if old is not None and old.txn is not None and self._where.get(old.txn) == k:
            del self._where[old.txn]
        self.log[k] = slot
        if slot.txn is not None:
            self._where[slot.txn] = k
        self._log_cache = None

    def _replace_log(self, items) -> None:
        self.log = dict(items)
        self._where = {s.txn: k for k, s in self.log.items() if s.txn is not None}
        self._log_cache = None

    def deliver(self, src: str, msg, mid) -> str:
        self._mark = len(self.out)
        outcome = self._dispatch(src, msg)
        self._record(src, msg, mid, outcome, at=self._mark)
        if outcome is DEFER:
            self.pending.append((src, msg, mid))
        elif outcome is HANDLED:
            self.settle()
        return outcome

    def _record(self, src, msg, mid, outcome, pre_epoch=None, at=None):
        # the handle note goes before whatever the handler emitted
        item = ("handle", src, mid, outcome, self.snapshot() if outcome is HANDLED else None, pre_epoch)
        self.out.insert(len(self.out) if at is None else at, item)

    def settle(self) -> None:
        """Retry parked messages and fire completion triggers until stable."""
        progress = True
        while progress:
            progress = False
            for i, (src, msg, mid) in enumerate(self.pending):
                self._mark = len(self.out)
                outcome = self._dispatch(src, msg)
                if outcome is DEFER:
                    continue
                del self.pending[i]
                self._record(src, msg, mid, outcome, at=self._mark)
                progress = True
                break
            if not progress and self._dirty:
                dirty, self._dirty = self._dirty, set()
                for t in sorted(dirty):
                    self._try_complete(t)

    def _dispatch(self, src, msg) -> str:
        name = self.HANDLERS.get(type(msg))
        if name is None:
            return DROP
        return getattr(self, name)(src, msg)

    # -- coordinator --------------------------------------------------------

    def _coord(self, t: str) -> CoordState:
        c = self.coord.get(t)
        if c is None:
            info = self.registry[t]
            c = self.coord[t] = CoordState(info.shards, info.client)
        return c

    def leader_of(self, s: str) -> str:
        raise NotImplementedError

    def certify(self, t: str, l: Payload) -> None:
        c = self._coord(t)
        for s in sorted(c.shards):
            self.send(self.leader_of(s), Prepare(t, project(l, s, self.certifier.shard_map)))
        self.note("invoke", "certify", (t,), True, self.snapshot())
        self.settle()

    def retry(self, k: int) -> bool:
        slot = self.log.get(k)
        ok = slot is not None and slot.phase is PREPARED and slot.txn is not None
        if ok:
            c = self._coord(slot.txn)
            for s in sorted(c.shards):
                self.send(self.leader_of(s), Prepare(slot.txn, None))
        self.note("invoke", "retry", (k, slot.txn if slot else None), ok, self.snapshot())
        self.settle()
        return ok

    def slot_of(self, t: str):
        return self._where.get(t)

    # -- leader -------------------------------------------------------------

    def _prefix(self, k: int) -> tuple:
        return tuple((j, s.txn, s.vote, s.payload) for j, s in sorted(self.log.items()) if j <= k)

    def on_prepare(self, src, m: Prepare):
        if self.status is not LEADER:
            return DEFER
        e = self.own_epoch()
        k = self._where.get(m.t)
        if k is None:
            self.next += 1
            k = self.next
            below = [(j, self.log[j]) for j in sorted(self.log) if j < k]
            committed = [(j, s) for j, s in below
                         if s.phase is DECIDED and s.dec is COMMIT and s.payload is not None]
            prepared = [(j, s) for j, s in below if s.phase is PREPARED and s.vote is COMMIT]
            if m.payload is not None:
                payload = m.payload
                cert = self.certifier
                vote = meet(cert.certify_committed_local(self.s0, [s.payload for _, s in committed], payload),
                            cert.certify_prepared_local(self.s0, [s.payload for _, s in prepared], payload))
            else:
                payload, vote = EMPTY, ABORT
            self._write(k, Slot(m.t, payload, vote, None, PREPARED))
            self.note("provenance", self.s0, e, k, m.t, vote,
                      tuple((s.txn, j) for j, s in committed), tuple((s.txn, j) for j, s in prepared))
        slot = self.log[k]
        self.send(src, PrepareAck(e, self.s0, k, m.t, slot.payload, slot.vote),
                  {"prefix": self._prefix(k)})
        return HANDLED

    def on_decision_client(self, src, m):
        # Client role is handled by the simulator; reaching here is a no-op.
        return HANDLED

    def on_cs_reply(self, src, m: CsReply):
        wait, self.cs_wait = self.cs_wait, None
        if wait is None:
            return DROP
        self._cs_continue(wait, m)
        return HANDLED

    def _cs_continue(self, wait, m):
        raise NotImplementedError

    def enabled_actions(self) -> list:
        return []

    HANDLERS: dict = {}


class MPReplica(Replica):
    """Replica of the message-passing protocol with per-shard epochs."""

    def __init__(self, pid, shard, certifier, registry, pool, target_size, bootstrap: dict):
        super().__init__(pid, shard, certifier, registry, pool, target_size)
        self.epoch = {s: c.epoch for s, c in bootstrap.items()}
        self.members = {s: c.members for s, c in bootstrap.items()}
        self.leader = {s: c.leader for s, c in bootstrap.items()}
        mine = bootstrap[shard]
        if pid in mine.members:
            self.initialized = True
            self.new_epoch = mine.epoch
            self.status = LEADER if mine.leader == pid else FOLLOWER
        else:
            # fresh process: knows the layout, belongs to no configuration yet
            self.epoch[shard] = 0
        self.probing = False
        self.probed_epoch = 0
        self.probed_members = frozenset()
        self.recon_epoch = 0
        self.recon_shard = None
        self.probe_acks: dict = {}
        self.recon_result = None

    def own_epoch(self):
        return self.epoch[self.s0]

    def leader_of(self, s):
        return self.leader[s]

    # -- coordinator --------------------------------------------------------

    def on_prepare_ack(self, src, m: PrepareAck):
        mine = self.epoch.get(m.shard, 0)
        if mine > m.epoch:
            return DROP
        if mine < m.epoch:
            return DEFER
        c = self._coord(m.t)
        c.prepared[(m.shard, m.epoch)] = (m.k, m.vote)
        followers = self.members[m.shard] - {self.leader[m.shard]}
        c.followers[(m.shard, m.epoch)] = followers
        self._forward_accepts(m, sorted(followers))
        self._dirty.add(m.t)
        return HANDLED

    def _forward_accepts(self, m: PrepareAck, followers):
        for f in followers:
            self.send(f, Accept(m.epoch, m.k, m.t, m.payload, m.vote))

    def on_accept_ack(self, src, m: AcceptAck):
        c = self._coord(m.t)
        c.acks.setdefault((m.shard, m.epoch), {})[src] = (m.k, m.vote)
        self._dirty.add(m.t)
        return HANDLED

    def _view_epoch(self, s):
        return self.epoch.get(s, 0)

    def _try_complete(self, t: str) -> None:
        c = self.coord.get(t)
        if c is None or c.done:
            return
        outcome = []
        for s in sorted(c.shards):
            e = self._view_epoch(s)
            prepared = c.prepared.get((s, e))
            if prepared is None:
                return
            followers = self._expected_followers(c, s, e)
            got = c.acks.get((s, e), {})
            if any(f not in got for f in followers):
                return
            outcome.append((s, e, prepared[0], prepared[1]))
        d = COMMIT
        for _, _, _, vote in outcome:
            d = meet(d, vote)
        c.done = True
        self.send(c.client, DecisionClient(t, d))
        for s, e, k, _ in outcome:
            for p in sorted(self.members[s]):
                self._send_decision(p, s, e, k, d)

    def _expected_followers(self, c, s, e):
        return self.members[s] - {self.leader[s]}

    def _send_decision(self, p, s, e, k, d):
        self.send(p, ShardDecision(e, k, d), {"shard": s})

    # -- follower -----------------------------------------------------------

    def on_accept(self, src, m: Accept):
        mine = self.epoch[self.s0]
        if mine > m.epoch:
            return DROP
        if self.status is not FOLLOWER or mine != m.epoch:
            return DEFER
        if self.log.get(m.k) is None:
            self._write(m.k, Slot(m.t, m.payload, m.vote, None, PREPARED))
        self.send(src, AcceptAck(self.s0, m.epoch, m.k, m.t, m.vote), {"payload": m.payload})
        return HANDLED

    def on_decision(self, src, m: ShardDecision):
        if self.status is RECONFIGURING or self.epoch[self.s0] < m.epoch:
            return DEFER
        self._apply_decision(m.k, m.decision)
        return HANDLED

    def _apply_decision(self, k, d):
        slot = self.log.get(k)
        if slot is None:
            slot = Slot(None, None, None, d, DECIDED)
        else:
            slot = replace(slot, dec=d, phase=DECIDED)
        self._write(k, slot)

    # -- reconfiguration ----------------------------------------------------

    def reconfigure(self, shard: str) -> bool:
        ok = not self.probing and self.cs_wait is None
        if ok:
            self.probing = True
            self.recon_shard = shard
            self.probe_acks = {}
            self.cs_wait = ("get_last", shard)
            self.send("cs", CsGetLast(shard))
        self.note("invoke", "reconfigure", (shard,), ok, self.snapshot())
        self.settle()
        return ok

    def _cs_continue(self, wait, m: CsReply):
        op = wait[0]
        if op == "get_last":
            cfg = m.result
            self.probed_epoch = cfg.epoch
            self.probed_members = cfg.members
            self.recon_epoch = cfg.epoch + 1
            for p in sorted(cfg.members):
                self.send(p, Probe(self.recon_epoch))
        elif op == "get":
            self.probed_members = m.result.members
            for p in sorted(self.probed_members):
                self.send(p, Probe(self.recon_epoch))
        elif op == "cas":
            members, new_leader = wait[1], wait[2]
            if m.result:
                self.send(new_leader, NewConfig(self.recon_epoch, members))
            self.note("invoke", "install", (self.recon_shard, self.recon_epoch), bool(m.result),
                      self.snapshot())

    def on_probe(self, src, m: Probe):
        if m.epoch < self.new_epoch:
            return DROP
        self.status = RECONFIGURING
        self.new_epoch = m.epoch
        self.send(src, ProbeAck(self.initialized, m.epoch, self.s0))
        return HANDLED

    def on_probe_ack(self, src, m: ProbeAck):
        if not self.probing or m.epoch != self.recon_epoch or m.shard != self.recon_shard:
            return DROP
        if self.cs_wait is not None:
            return DEFER
        self.probe_acks[src] = self.probe_acks.get(src, False) or m.initialized
        if m.initialized:
            self.probing = False
            try:
                members, fresh = compute_membership(
                    set(self.probe_acks), src, self.pool.available(self.recon_shard),
                    self.target_size, {p for p, ok in self.probe_acks.items() if ok})
            except PoolExhausted as exc:
                self.note("error", f"reconfiguration of {self.recon_shard} abandoned: {exc}")
                return HANDLED
            self.pool.consume(self.recon_shard, fresh)
            cfg = Configuration(self.recon_epoch, members, src)
            self.cs_wait = ("cas", members, src)
            self.send("cs", CsCas(self.recon_shard, self.recon_epoch - 1, cfg))
        return HANDLED

    def _can_descend(self) -> bool:
        if not self.probing or self.cs_wait is not None or self.probed_epoch <= 1:
            return False
        if any(self.probe_acks.values()):
            return False
        return any(p in self.probed_members for p in self.probe_acks)

    def enabled_actions(self):
        return ["descend"] if self._can_descend() else []

    def perform(self, action) -> bool:
        if action == "descend" and self._can_descend():
            self.probed_epoch -= 1
            self.cs_wait = ("get", self.recon_shard)
            self.send("cs", CsGet(self.recon_shard, self.probed_epoch))
            self.note("invoke", "descend", (self.recon_shard, self.probed_epoch), True, self.snapshot())
            self.settle()
            return True
        return False

    def on_new_config(self, src, m: NewConfig):
        if m.epoch < self.new_epoch:
            return DROP
        if m.epoch > self.new_epoch:
            return DEFER
        self.status = LEADER
        self.epoch[self.s0] = m.epoch
        self.members[self.s0] = m.members
        self.leader[self.s0] = self.pid
        self.next = max(self.log, default=0)
        self._dirty |= set(self.coord)
        state = tuple(sorted(self.log.items()))
        for p in sorted(m.members - {self.pid}):
            self.send(p, NewState(m.epoch, m.members, state))
        return HANDLED

    def on_new_state(self, src, m: NewState):
        if m.epoch < self.new_epoch:
            return DROP
        self.initialized = True
        self.status = FOLLOWER
        self.epoch[self.s0] = m.epoch
        self.members[self.s0] = m.members
        self.leader[self.s0] = src
        self.new_epoch = m.epoch
        self._replace_log(m.log)
        self.next = max(self.log, default=0)
        self._dirty |= set(self.coord)
        return HANDLED

    def on_config_change(self, src, m: ConfigChange):
        if m.shard == self.s0 or self.epoch.get(m.shard, 0) >= m.epoch:
            return DROP
        self.epoch[m.shard] = m.epoch
        self.members[m.shard] = m.members
        self.leader[m.shard] = m.leader
        self._dirty |= set(self.coord)
        return HANDLED

    HANDLERS = {
        Prepare: "on_prepare",
        PrepareAck: "on_prepare_ack",
        Accept: "on_accept",
        AcceptAck: "on_accept_ack",
        ShardDecision: "on_decision",
        DecisionClient: "on_decision_client",
        Probe: "on_probe",
        ProbeAck: "on_probe_ack",
        NewConfig: "on_new_config",
        NewState: "on_new_state",
        ConfigChange: "on_config_change",
        CsReply: "on_cs_reply",
    }
