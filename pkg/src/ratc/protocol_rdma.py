"""Atomic commit over one-sided RDMA writes.

ACCEPT and shard DECISION messages are written straight into follower
memory; followers cannot refuse them, so safety rests on access control:
a process closes every connection as soon as it is probed, and connections
are reopened only between members of the newly installed configuration.
Reconfiguration therefore covers the whole system under one epoch.

`NaiveRdmaReplica` grafts RDMA writes onto per-shard reconfiguration
without the connection handshake.  It is unsafe and exists so the checkers
have a known-bad target.
"""

from __future__ import annotations

from enum import Enum

from .certification import COMMIT, meet
from .config_service import GLOBAL, GlobalConfiguration
from .messages import (
    Accept, ConfigPrepare, ConfigPrepareAck, Connect, ConnectAck, CsCas, CsGet, CsGetLast,
    CsReply, DecisionClient, NewConfig, NewState, Prepare, PrepareAck, Probe, ProbeAck,
    ShardDecision,
)
from .protocol_mp import (
    DECIDED, DEFER, DROP, FOLLOWER, HANDLED, LEADER, PREPARED, RECONFIGURING,
    MPReplica, PoolExhausted, Replica, Slot, compute_membership,
)


class RecStatus(str, Enum):
    READY = "READY"
    PROBING = "PROBING"
    INSTALLING = "INSTALLING"


READY, PROBING, INSTALLING = RecStatus.READY, RecStatus.PROBING, RecStatus.INSTALLING


class RdmaDelivery:
    """Slot updates common to both RDMA variants."""

    def _rdma_write(self, m) -> None:
        if isinstance(m, Accept):
            old = self.log.get(m.k)
            phase = PREPARED
            dec = None
            if old is not None and old.phase is DECIDED and old.txn == m.t:
                phase, dec = DECIDED, old.dec
            self._write(m.k, Slot(m.t, m.payload, m.vote, dec, phase))
        elif isinstance(m, ShardDecision):
            self._apply_decision(m.k, m.decision)

    def deliver_rdma(self, sender, msg, mid) -> None:
        pre = self.own_epoch()
        self._rdma_write(msg)
        self.note("handle", sender, mid, HANDLED, self.snapshot(), pre)
        self.settle()

    def rdma_acked(self, receiver, msg, meta) -> None:
        if isinstance(msg, Accept):
            c = self._coord(msg.t)
            key = (meta["shard"], meta["prepare_epoch"])
            c.acks.setdefault(key, {})[receiver] = (msg.k, msg.vote)
            self._dirty.add(msg.t)
        self.settle()


class NaiveRdmaReplica(RdmaDelivery, MPReplica):
    def _forward_accepts(self, m: PrepareAck, followers):
        for f in followers:
            self.send_rdma(f, Accept(None, m.k, m.t, m.payload, m.vote),
                           {"shard": m.shard, "prepare_epoch": m.epoch})

    def _send_decision(self, p, s, e, k, d):
        self.send_rdma(p, ShardDecision(None, k, d), {"shard": s, "epoch": e})


class RdmaReplica(RdmaDelivery, Replica):
    def __init__(self, pid, shard, certifier, registry, pool, target_size,
                 bootstrap: GlobalConfiguration, fabric):
        super().__init__(pid, shard, certifier, registry, pool, target_size)
        self.fabric = fabric
        self.members = {s: m for s, m in bootstrap.members}
        self.leader = dict(bootstrap.leaders)
        self.epoch = 0
        self.connections: set = set()
        everyone = bootstrap.everyone()
        if pid in everyone:
            self.epoch = bootstrap.epoch
            self.new_epoch = bootstrap.epoch
            self.initialized = True
            self.status = LEADER if self.leader[shard] == pid else FOLLOWER
            for p in sorted(everyone):
                fabric.open(pid, p)
                self.connections.add(p)
        self.rec_status = READY
        self.probed_epoch: dict = {}
        self.probed_members: dict = {}
        self.recon_epoch = 0
        self.recon_members = frozenset()
        self.recon_leaders: dict = {}
        self.probe_acks: dict = {}      # shard -> {pid: initialized}
        self.true_order: dict = {}      # shard -> first initialized responder
        self.prep_acks: set = set()

    def own_epoch(self):
        return self.epoch

    def leader_of(self, s):
        return self.leader[s]

    def everyone(self) -> set:
        out = set()
        for m in self.members.values():
            out |= m
        return out

    # -- coordinator --------------------------------------------------------

    def on_prepare_ack(self, src, m: PrepareAck):
        if m.epoch < self.epoch:
            return DROP
        if m.epoch > self.epoch:
            return DEFER
        c = self._coord(m.t)
        c.prepared[(m.shard, m.epoch)] = (m.k, m.vote)
        followers = self.members[m.shard] - {self.leader[m.shard]}
        c.followers[(m.shard, m.epoch)] = followers
        for f in sorted(followers):
            self.send_rdma(f, Accept(None, m.k, m.t, m.payload, m.vote),
                           {"shard": m.shard, "prepare_epoch": m.epoch})
        self._dirty.add(m.t)
        return HANDLED

    def _try_complete(self, t):
        c = self.coord.get(t)
        if c is None or c.done:
            return
        e = self.epoch
        outcome = []
        for s in sorted(c.shards):
            prepared = c.prepared.get((s, e))
            if prepared is None:
                return
            got = c.acks.get((s, e), {})
            if any(f not in got for f in c.followers[(s, e)]):
                return
            outcome.append((s, prepared[0], prepared[1]))
        d = COMMIT
        for _, _, vote in outcome:
            d = meet(d, vote)
        c.done = True
        self.send(c.client, DecisionClient(t, d))
        for s, k, _ in outcome:
            for p in sorted(self.members[s]):
                self.send_rdma(p, ShardDecision(None, k, d), {"shard": s, "epoch": e})

    def _apply_decision(self, k, d):
        MPReplica._apply_decision(self, k, d)

    # -- reconfiguration ----------------------------------------------------

    def reconfigure(self, shard=None) -> bool:
        ok = self.rec_status is READY and self.cs_wait is None
        if ok:
            self.rec_status = PROBING
            self.probe_acks = {}
            self.true_order = {}
            self.cs_wait = ("get_last",)
            self.send("cs", CsGetLast(GLOBAL))
        self.note("invoke", "reconfigure", (), ok, self.snapshot())
        self.settle()
        return ok

    def _cs_continue(self, wait, m: CsReply):
        op = wait[0]
        if op == "get_last":
            cfg = m.result
            self.recon_epoch = cfg.epoch + 1
            self.probed_epoch = {s: cfg.epoch for s, _ in cfg.members}
            self.probed_members = {s: ms for s, ms in cfg.members}
            self.probe_acks = {s: {} for s in self.probed_members}
            for p in sorted(cfg.everyone()):
                self.send(p, Probe(self.recon_epoch))
        elif op == "get":
            s = wait[1]
            self.probed_members[s] = m.result.members_of(s)
            for p in sorted(self.probed_members[s]):
                self.send(p, Probe(self.recon_epoch))
        elif op == "cas":
            cfg = wait[1]
            if m.result:
                self.rec_status = INSTALLING
                self.recon_members = cfg.everyone()
                self.recon_leaders = dict(cfg.leaders)
                self.prep_acks = set()
                for p in sorted(self.recon_members):
                    self.send(p, ConfigPrepare(cfg.epoch, cfg.members, cfg.leaders))
            self.note("invoke", "install", (GLOBAL, cfg.epoch), bool(m.result), self.snapshot())

    def on_probe(self, src, m: Probe):
        if m.epoch < self.new_epoch:
            return DROP
        self.status = RECONFIGURING
        for p in sorted(self.connections):
            self.fabric.close(self.pid, p)
        self.connections = set()
        self.new_epoch = m.epoch
        self.send(src, ProbeAck(self.initialized, m.epoch, self.s0))
        return HANDLED

    def on_probe_ack(self, src, m: ProbeAck):
        if self.rec_status is not PROBING or m.epoch != self.recon_epoch:
            return DROP
        if self.cs_wait is not None:
            return DEFER
        acks = self.probe_acks.setdefault(m.shard, {})
        acks[src] = acks.get(src, False) or m.initialized
        if m.initialized:
            self.true_order.setdefault(m.shard, src)
        if all(s in self.true_order for s in self.probed_members):
            self._install()
        return HANDLED

    def _install(self):
        self.rec_status = READY
        members, leaders, used = {}, {}, {}
        try:
            for s in sorted(self.probed_members):
                acks = self.probe_acks[s]
                leader = self.true_order[s]
                ms, fresh = compute_membership(set(acks), leader, self.pool.available(s),
                                               self.target_size, {p for p, ok in acks.items() if ok})
                members[s], leaders[s], used[s] = ms, leader, fresh
        except PoolExhausted as exc:
            self.note("error", f"global reconfiguration abandoned: {exc}")
            return
        for s, fresh in used.items():
            self.pool.consume(s, fresh)
        cfg = GlobalConfiguration.build(self.recon_epoch, members, leaders)
        self.cs_wait = ("cas", cfg)
        self.send("cs", CsCas(GLOBAL, self.recon_epoch - 1, cfg))

    def _descendable(self) -> list:
        if self.rec_status is not PROBING or self.cs_wait is not None:
            return []
        out = []
        for s in sorted(self.probed_members):
            if s in self.true_order or self.probed_epoch[s] <= 1:
                continue
            if any(p in self.probed_members[s] for p in self.probe_acks.get(s, ())):
                out.append(s)
        return out

    def enabled_actions(self):
        return [("descend", s) for s in self._descendable()]

    def perform(self, action) -> bool:
        if isinstance(action, tuple) and action[0] == "descend" and action[1] in self._descendable():
            s = action[1]
            self.probed_epoch[s] -= 1
            self.cs_wait = ("get", s)
            self.send("cs", CsGet(GLOBAL, self.probed_epoch[s]))
            self.note("invoke", "descend", (s, self.probed_epoch[s]), True, self.snapshot())
            self.settle()
            return True
        return False

    def on_config_prepare(self, src, m: ConfigPrepare):
        if m.epoch < self.new_epoch:
            return DROP
        self.members = dict(m.members)
        self.leader = dict(m.leaders)
        self.new_epoch = m.epoch
        self.send(src, ConfigPrepareAck(m.epoch))
        return HANDLED

    def on_config_prepare_ack(self, src, m: ConfigPrepareAck):
        if self.rec_status is not INSTALLING or m.epoch != self.recon_epoch:
            return DROP
        self.prep_acks.add(src)
        if self.prep_acks >= self.recon_members:
            for s in sorted(self.recon_leaders):
                self.send(self.recon_leaders[s], NewConfig(m.epoch, None))
            self.rec_status = READY
        return HANDLED

    def _flush(self):
        for entry in self.fabric.flush(self.pid):
            pre = self.own_epoch()
            self._rdma_write(entry.msg)
            self.note("handle", entry.sender, entry.mid, HANDLED, self.snapshot(), pre)
        # the triggering message is recorded after the flushed deliveries
        self._mark = len(self.out)

    def _open_self(self):
        self.fabric.open(self.pid, self.pid)
        self.connections.add(self.pid)

    def on_new_config(self, src, m: NewConfig):
        if m.epoch < self.new_epoch:
            return DROP
        if m.epoch > self.new_epoch:
            return DEFER
        self._flush()
        self.status = LEADER
        self.epoch = m.epoch
        self.next = max(self.log, default=0)
        self._dirty |= set(self.coord)
        state = tuple(sorted(self.log.items()))
        for p in sorted(self.members[self.s0] - {self.pid}):
            self.send(p, NewState(m.epoch, None, state))
        self._open_self()
        for p in sorted(self.everyone() - {self.pid}):
            self.send(p, Connect(self.epoch))
        return HANDLED

    def on_new_state(self, src, m: NewState):
        if m.epoch < self.new_epoch:
            return DROP
        self._flush()
        self.status = FOLLOWER
        self.epoch = m.epoch
        self.new_epoch = m.epoch
        self.initialized = True
        self._replace_log(m.log)
        self.next = max(self.log, default=0)
        self._dirty |= set(self.coord)
        self._open_self()
        for p in sorted(self.everyone() - {self.pid, self.leader[self.s0]}):
            self.send(p, Connect(self.epoch))
        return HANDLED

    def _connect_guard(self, src, m):
        if m.epoch < self.epoch:
            return DROP
        if self.status is RECONFIGURING or m.epoch > self.epoch:
            return DEFER
        if src in self.connections:
            return DROP
        return None

    def on_connect(self, src, m: Connect):
        g = self._connect_guard(src, m)
        if g is not None:
            return g
        self.fabric.open(self.pid, src)
        self.connections.add(src)
        self.send(src, ConnectAck(m.epoch))
        return HANDLED

    def on_connect_ack(self, src, m: ConnectAck):
        g = self._connect_guard(src, m)
        if g is not None:
            return g
        self.fabric.open(self.pid, src)
        self.connections.add(src)
        return HANDLED

    HANDLERS = {
        Prepare: "on_prepare",
        PrepareAck: "on_prepare_ack",
        DecisionClient: "on_decision_client",
        Probe: "on_probe",
        ProbeAck: "on_probe_ack",
        ConfigPrepare: "on_config_prepare",
        ConfigPrepareAck: "on_config_prepare_ack",
        NewConfig: "on_new_config",
        NewState: "on_new_state",
        Connect: "on_connect",
        ConnectAck: "on_connect_ack",
        CsReply: "on_cs_reply",
    }
