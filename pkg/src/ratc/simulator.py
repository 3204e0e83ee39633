"""Seeded discrete-event simulation of the commit protocols.

Time is logical.  Every message gets a latency drawn from the configured
range; channels are FIFO per (sender, receiver) pair, so a delivery event
always hands over the oldest undelivered message of its channel.  Ties at
equal time are broken by the seeded RNG, which makes the interleaving
random but reproducible.

Scripts drive what the protocol leaves open: when transactions are
submitted, who crashes, who starts a reconfiguration or a retry, and which
messages are held back to pin down a specific interleaving.  A script step
either has a time or runs when the system goes idle.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .certification import COMMIT, Payload, Serializability, ShardMap, shards_of
from .config_service import (
    ConfigService, global_bootstrap, per_shard_bootstrap,
)
from .messages import DecisionClient, kind_of
from .protocol_mp import PREPARED, FreshPool, MPReplica, TxnInfo
from .protocol_rdma import NaiveRdmaReplica, RdmaReplica
from .rdma_channel import ACCEPTED, FULL, Entry, RdmaFabric
from .trace import Trace

MODELS = ("mp", "rdma", "naive-rdma")


@dataclass(frozen=True)
class TxnSpec:
    """A transaction to submit.

    ``reads`` maps object -> version, or -> None to read whatever version
    the simulated store holds at submission time.
    """
    t: str
    coordinator: Optional[str] = None
    client: Optional[str] = None
    reads: tuple = ()       # ((obj, version-or-None), ...)
    writes: tuple = ()      # ((obj, value), ...)
    commit_version: Optional[int] = None


@dataclass(frozen=True)
class Step:
    action: str
    args: tuple = ()
    at: Optional[int] = None        # None: run once the system is idle
    opts: tuple = ()                # ((key, value), ...)

    def opt(self, key, default=None):
        return dict(self.opts).get(key, default)


@dataclass(frozen=True)
class Workload:
    generate: int = 0
    conflict_rate: float = 0.3
    horizon: int = 20
    clients: int = 2
    hot_objects: int = 2
    colocate_clients: bool = False
    txns: tuple = ()                # explicit TxnSpecs, submitted by script steps


@dataclass(frozen=True)
class FaultPolicy:
    """Random crash / reconfiguration / retry injection for fuzzing."""
    crash_prob: float = 0.5
    reconfigure_prob: float = 0.6
    retry_prob: float = 0.3
    horizon: int = 60


@dataclass(frozen=True)
class SimConfig:
    shards: int = 2
    replicas: int = 2
    pool: int = 1
    seed: int = 0
    model: str = "mp"
    latency: tuple = (1, 1)
    ack_latency: tuple = (1, 1)
    pull_delay: tuple = (0, 0)
    descend_delay: tuple = (0, 4)
    rdma_capacity: int = 64
    max_steps: int = 200_000
    workload: Workload = field(default_factory=Workload)
    script: tuple = ()
    faults: Optional[FaultPolicy] = None

    def __post_init__(self):
        if self.replicas < 1:
            raise ValueError("need at least one replica per shard")
        if self.pool < 0:
            raise ValueError("pool size cannot be negative")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")


def layout_for(cfg: SimConfig) -> tuple:
    """Shard names, bootstrap members and fresh pools.

    Bootstrap members come first (p1, p2 in s1; p3, p4 in s2; ...), then
    pool processes in shard order.
    """
    shards = [f"s{i + 1}" for i in range(cfg.shards)]
    n = 0
    members = {}
    for s in shards:
        members[s] = [f"p{n + j + 1}" for j in range(cfg.replicas)]
        n += cfg.replicas
    pools = {}
    for s in shards:
        pools[s] = [f"p{n + j + 1}" for j in range(cfg.pool)]
        n += cfg.pool
    return shards, members, pools


class SimulatedStore:
    """Latest committed version and value per object, fed by client decisions."""

    def __init__(self):
        self.data: dict = {}

    def version(self, obj) -> int:
        return self.data.get(obj, (0, None))[0]

    def apply(self, payload: Payload) -> None:
        for x, val in payload.writes:
            if payload.commit_version > self.version(x):
                self.data[x] = (payload.commit_version, val)


class Simulator:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.shards, self.layout, self.pools = layout_for(cfg)
        self.shard_map = ShardMap(shards=self.shards)
        self.certifier = Serializability(self.shard_map)
        self.registry: dict = {}
        self.pool = FreshPool(self.pools)
        self.fabric = RdmaFabric(cfg.rdma_capacity)
        self.store = SimulatedStore()
        self.proc_shard = {p: s for s, ps in self.layout.items() for p in ps}
        self.proc_shard.update({p: s for s, ps in self.pools.items() for p in ps})
        if cfg.model == "rdma":
            boot = global_bootstrap(self.layout)
            self.cs = ConfigService(boot)
            self.procs = {p: RdmaReplica(p, s, self.certifier, self.registry, self.pool,
                                         cfg.replicas, boot, self.fabric)
                          for p, s in self.proc_shard.items()}
        else:
            boot = per_shard_bootstrap(self.layout)
            self.cs = ConfigService(boot)
            cls = MPReplica if cfg.model == "mp" else NaiveRdmaReplica
            self.procs = {p: cls(p, s, self.certifier, self.registry, self.pool,
                                 cfg.replicas, boot)
                          for p, s in self.proc_shard.items()}
            if cfg.model == "naive-rdma":
                everyone = sorted(self.procs)
                for a in everyone:
                    for b in everyone:
                        self.fabric.open(a, b)
        self.bootstrap = boot
        self.txn_specs = {t.t: t for t in cfg.workload.txns}
        self.records: list = []
        self.heap: list = []
        self.seq = 0
        self.now = 0
        self.steps = 0
        self.mid = 0
        self.chans: dict = {}
        self.crashed: set = set()
        self.holds: dict = {}
        self.parked: list = []
        self.full_wait: dict = {}
        self.scheduled_actions: set = set()
        self.idle_queue: deque = deque()
        self.decided: dict = {}
        self.client_seen: set = set()
        self.certified: dict = {}
        self.clients = [f"c{i + 1}" for i in range(max(1, cfg.workload.clients))]

    # -- recording ----------------------------------------------------------

    def rec(self, kind, src=None, dst=None, **data):
        self.records.append({"step": self.steps, "time": self.now, "kind": kind,
                             "src": src, "dst": dst, "data": data})

    def meta(self) -> dict:
        return {
            "model": self.cfg.model, "seed": self.cfg.seed, "shards": tuple(self.shards),
            "layout": {s: tuple(ps) for s, ps in self.layout.items()},
            "pools": {s: tuple(ps) for s, ps in self.pools.items()},
            "proc_shard": dict(self.proc_shard),
            "bootstrap": self.bootstrap,
            "replicas": self.cfg.replicas,
        }

    # -- scheduling ---------------------------------------------------------

    def schedule(self, time, kind, arg):
        self.seq += 1
        heapq.heappush(self.heap, (time, self.rng.random(), self.seq, kind, arg))

    def draw(self, bounds) -> int:
        lo, hi = bounds
        return lo if lo == hi else self.rng.randint(lo, hi)

    def _enqueue(self, chan, src, dst, item, latency):
        key = (chan, src, dst)
        q = self.chans.get(key)
        if q is None:
            q = self.chans[key] = deque()
        q.append(item)
        self.schedule(self.now + latency, "chan", key)

    def emit(self, src, dst, msg, meta=None, chan="net"):
        self.mid += 1
        mid = self.mid
        self.rec("send", src, dst, id=mid, msg=msg, chan=chan, meta=meta)
        if isinstance(msg, DecisionClient) and msg.t not in self.decided:
            self.decided[msg.t] = msg.decision
            self.rec("decide", src, dst, t=msg.t, d=msg.decision)
        if dst in self.crashed:
            return
        lat = 0 if src == dst else self.draw(self.cfg.latency)
        if chan == "net":
            self._enqueue("net", src, dst, (mid, msg, meta), lat)
        else:
            gen = self.fabric.issue(src, dst)
            self._enqueue("rdma", src, dst, (mid, msg, meta, gen), lat)

    def drain(self, pid):
        proc = self.procs[pid]
        out, proc.out = proc.out, []
        for item in out:
            tag = item[0]
            if tag == "send":
                _, dst, msg, meta, chan = item
                self.emit(pid, dst, msg, meta, chan)
            elif tag == "handle":
                _, src, mid, outcome, state, pre = item
                self.rec("handle", src, pid, id=mid, outcome=outcome, state=state, pre_epoch=pre)
            elif tag == "provenance":
                _, s, e, k, t, vote, T, P = item
                self.rec("provenance", pid, None, shard=s, epoch=e, k=k, t=t, vote=vote, T=T, P=P)
            elif tag == "invoke":
                _, name, args, ok, state = item
                self.rec("invoke", pid, None, action=name, args=args, ok=ok, state=state)
            elif tag == "error":
                self.rec("error", pid, None, text=item[1])
        if pid not in self.crashed:
            for a in proc.enabled_actions():
                if (pid, a) not in self.scheduled_actions:
                    self.scheduled_actions.add((pid, a))
                    self.schedule(self.now + self.draw(self.cfg.descend_delay), "act", (pid, a))

    # -- holds --------------------------------------------------------------

    def _held(self, src, dst, msg, chan) -> Optional[str]:
        kind = kind_of(msg)
        for name, (hs, hd, hk, hc) in self.holds.items():
            if (hs in (None, src) and hd in (None, dst) and hk in (None, kind)
                    and hc in (None, chan)):
                return name
        return None

    # -- event handlers -----------------------------------------------------

    def _fire_chan(self, key) -> bool:
        chan, src, dst = key
        q = self.chans.get(key)
        if not q:
            return False
        item = q[0]
        if chan != "ack":
            rule = self._held(src, dst, item[1], chan)
            if rule is not None:
                self.parked.append((rule, key))
                return False
        if chan == "net":
            q.popleft()
            self._deliver_net(src, dst, *item)
        elif chan == "rdma":
            mid, msg, meta, gen = item
            res = self.fabric.land(src, dst, Entry(mid, src, msg, meta), gen)
            if res == FULL:
                self.full_wait.setdefault(dst, []).append(key)
                return False
            q.popleft()
            ok = res == ACCEPTED
            self.rec("land", src, dst, id=mid, accepted=ok)
            if ok:
                self._enqueue("ack", dst, src, (mid, msg, meta), self.draw(self.cfg.ack_latency))
                self.schedule(self.now + self.draw(self.cfg.pull_delay), "pull", dst)
        else:
            q.popleft()
            mid, msg, meta = item
            if dst in self.crashed:
                return True
            self.rec("rdma_ack", src, dst, id=mid)
            self.procs[dst].rdma_acked(src, msg, meta)
            self.drain(dst)
        return True

    def _deliver_net(self, src, dst, mid, msg, meta):
        if dst == "cs":
            self.rec("handle", src, dst, id=mid, outcome="handled", state=None, pre_epoch=None)
            for to, reply in self.cs.handle(src, msg):
                self.emit("cs", to, reply)
            op = self.cs.oplog[-1]
            if op[0] == "cas":
                self.rec("cs", src, None, op="cas", key=op[2], expected=op[3], config=op[4])
            return
        if isinstance(msg, DecisionClient):
            first = msg.t not in self.client_seen
            self.rec("client", src, dst, id=mid, t=msg.t, d=msg.decision, first=first)
            if first:
                self.client_seen.add(msg.t)
                info = self.registry.get(msg.t)
                if msg.decision is COMMIT and info is not None:
                    self.store.apply(info.payload)
            return
        if dst in self.crashed:
            return
        self.procs[dst].deliver(src, msg, mid)
        self.drain(dst)

    def _fire_pull(self, pid) -> bool:
        if pid in self.crashed or not self.fabric.has_pending(pid):
            return False
        proc = self.procs[pid]
        for entry in self.fabric.pull(pid, self.rng):
            proc.deliver_rdma(entry.sender, entry.msg, entry.mid)
        self.drain(pid)
        for key in self.full_wait.pop(pid, []):
            self.schedule(self.now, "chan", key)
        return True

    def _fire_act(self, arg) -> bool:
        pid, action = arg
        self.scheduled_actions.discard(arg)
        if pid in self.crashed:
            return False
        done = self.procs[pid].perform(action)
        self.drain(pid)
        return done

    # -- script -------------------------------------------------------------

    def live(self, candidates) -> list:
        return [p for p in candidates if p not in self.crashed]

    def bootstrap_processes(self) -> list:
        return [p for s in self.shards for p in self.layout[s]]

    def submit(self, spec: TxnSpec) -> None:
        coord = spec.coordinator
        if coord is None:
            alive = self.live(self.bootstrap_processes())
            if not alive:
                self.rec("invoke", None, None, action="certify", args=(spec.t,), ok=False, state=None)
                return
            coord = self.rng.choice(alive)
        client = spec.client
        if client is None:
            client = coord if self.cfg.workload.colocate_clients else self.rng.choice(self.clients)
        reads = {x: (self.store.version(x) if v is None else v) for x, v in spec.reads}
        payload = Payload.make(reads, dict(spec.writes), spec.commit_version)
        shards = shards_of(payload, self.shard_map)
        self.registry[spec.t] = TxnInfo(payload, shards, client)
        self.certified[spec.t] = coord
        self.rec("certify", coord, client, t=spec.t, payload=payload, shards=shards)
        if coord in self.crashed:
            return
        self.procs[coord].certify(spec.t, payload)
        self.drain(coord)

    def generate_txn(self, t: str) -> TxnSpec:
        wl = self.cfg.workload
        rng = self.rng
        touched = rng.sample(self.shards, min(len(self.shards), rng.choice((1, 2))))
        reads, writes = [], []
        for s in sorted(touched):
            for i in range(rng.choice((1, 2))):
                if rng.random() < wl.conflict_rate:
                    x = f"{s}:h{rng.randrange(wl.hot_objects)}"
                else:
                    x = f"{s}:{t}.{i}"
                if any(x == y for y, _ in reads):
                    continue
                reads.append((x, None))
                if rng.random() < 0.7:
                    writes.append((x, f"{t}"))
        return TxnSpec(t, reads=tuple(reads), writes=tuple(writes))

    def apply_step(self, step: Step) -> bool:
        a = step.action
        if a == "certify":
            t = step.args[0]
            spec = self.txn_specs.get(t)
            if spec is None:
                spec = self.generate_txn(t)
            self.submit(spec)
        elif a == "crash":
            self.inject_crash(step.args[0])
        elif a == "reconfigure":
            pid = self._pick(step.args[0], self.bootstrap_processes())
            shard = step.args[1] if len(step.args) > 1 else None
            if pid is None:
                return False
            self.procs[pid].reconfigure(shard)
            self.drain(pid)
        elif a == "retry":
            self._retry(step.args[0], step.args[1])
        elif a == "hold":
            name = step.args[0]
            o = dict(step.opts)
            self.holds[name] = (o.get("src"), o.get("dst"), o.get("kind"), o.get("chan"))
            self.rec("hold", None, None, name=name, rule=self.holds[name])
        elif a == "release":
            name = step.args[0]
            self.holds.pop(name, None)
            keep = []
            for rule, key in self.parked:
                if rule == name:
                    self.schedule(self.now, "chan", key)
                else:
                    keep.append((rule, key))
            self.parked = keep
            self.rec("release", None, None, name=name)
        elif a == "noop":
            pass
        else:
            raise ValueError(f"unknown script action {a!r}")
        return True

    def _pick(self, who, candidates):
        if who in (None, "auto", "*"):
            alive = self.live(candidates)
            return self.rng.choice(alive) if alive else None
        return None if who in self.crashed else who

    def _retry(self, who, target):
        """``target`` is a slot number or a transaction id."""
        candidates = []
        for p in sorted(self.procs):
            if p in self.crashed:
                continue
            proc = self.procs[p]
            k = target if isinstance(target, int) else proc.slot_of(target)
            if k is not None and k in proc.log and proc.log[k].phase is PREPARED:
                candidates.append((p, k))
        if who not in (None, "auto", "*"):
            proc = self.procs[who]
            if who in self.crashed:
                return
            k = target if isinstance(target, int) else proc.slot_of(target)
            if k is None:
                self.rec("invoke", who, None, action="retry", args=(target,), ok=False, state=None)
                return
            proc.retry(k)
            self.drain(who)
            return
        if candidates:
            p, k = self.rng.choice(candidates)
            self.procs[p].retry(k)
            self.drain(p)

    def inject_crash(self, pid) -> None:
        if pid in self.crashed:
            return
        self.crashed.add(pid)
        self.procs[pid].crashed = True
        for key, q in self.chans.items():
            if key[2] == pid:
                q.clear()
        self.fabric.destroy(pid)
        self.full_wait.pop(pid, None)
        self.rec("crash", pid, None)

    def random_script(self, policy: FaultPolicy, rng: random.Random) -> list:
        steps = []
        wl = self.cfg.workload
        for i in range(wl.generate):
            steps.append(Step("certify", (f"t{i + 1}",), at=rng.randint(0, wl.horizon)))
        for s in self.shards:
            crash_at = None
            if rng.random() < policy.crash_prob:
                crash_at = rng.randint(0, policy.horizon)
                steps.append(Step("crash", (rng.choice(self.layout[s]),), at=crash_at))
            if crash_at is not None or rng.random() < policy.reconfigure_prob:
                lo = 0 if crash_at is None else crash_at + 1
                who = rng.choice(self.bootstrap_processes())
                steps.append(Step("reconfigure", (who, s), at=rng.randint(lo, lo + policy.horizon)))
        for i in range(wl.generate):
            if rng.random() < policy.retry_prob:
                steps.append(Step("retry", ("auto", f"t{i + 1}"),
                                  at=rng.randint(0, wl.horizon + policy.horizon)))
        return steps

    # -- main loop ----------------------------------------------------------

    def run(self) -> Trace:
        cfg = self.cfg
        script = list(cfg.script)
        if cfg.faults is not None:
            script += self.random_script(cfg.faults, random.Random(f"faults-{cfg.seed}"))
        elif cfg.workload.generate and not any(s.action == "certify" for s in script):
            for i in range(cfg.workload.generate):
                script.append(Step("certify", (f"t{i + 1}",),
                                   at=self.rng.randint(0, cfg.workload.horizon)))
        for step in script:
            if step.at is None:
                self.idle_queue.append(step)
            else:
                self.schedule(step.at, "step", step)
        reason = "quiescent"
        while True:
            if self.steps >= cfg.max_steps:
                reason = "max_steps"
                break
            if not self.heap:
                if not self.idle_queue:
                    break
                self.apply_step(self.idle_queue.popleft())
                self.steps += 1
                continue
            time, _, _, kind, arg = heapq.heappop(self.heap)
            self.now = max(self.now, time)
            if kind == "chan":
                done = self._fire_chan(arg)
            elif kind == "pull":
                done = self._fire_pull(arg)
            elif kind == "act":
                done = self._fire_act(arg)
            else:
                done = self.apply_step(arg)
            if done:
                self.steps += 1
        undecided = tuple(sorted(t for t in self.certified if t not in self.decided))
        self.rec("end", None, None, reason=reason, steps=self.steps, undecided=undecided)
        return Trace({"meta": self.meta()}, self.records)


def run(cfg: SimConfig) -> Trace:
    return Simulator(cfg).run()


def gen_workload(n: int, conflict_rate: float, seed: int, shards: int = 2) -> list:
    """Standalone transaction specs (reads resolved against an empty store)."""
    sim = Simulator(SimConfig(shards=shards, seed=seed,
                              workload=Workload(conflict_rate=conflict_rate)))
    return [sim.generate_txn(f"t{i + 1}") for i in range(n)]


def count_delays(trace: Trace, t: str) -> Optional[int]:
    """Longest causal chain of message hops from certify(t) to the first
    client delivery of its decision.  Messages a process sends to itself
    cost nothing.  Returns None if the client never heard back.
    """
    depth: dict = {}
    msg_depth: dict = {}
    hops: dict = {}
    for r in trace.records:
        kind = r["kind"]
        if kind == "certify" and r["data"]["t"] == t:
            depth[r["src"]] = max(depth.get(r["src"], 0), 0)
        elif kind == "send":
            d = depth.get(r["src"])
            if d is not None:
                mid = r["data"]["id"]
                msg_depth[mid] = d
                hops[mid] = 0 if r["src"] == r["dst"] else 1
        elif kind in ("handle", "rdma_ack"):
            mid = r["data"]["id"]
            if mid in msg_depth and r["data"].get("outcome", "handled") == "handled":
                pid = r["dst"]
                d = msg_depth[mid] + hops[mid]
                depth[pid] = max(depth.get(pid, d), d)
        elif kind == "client" and r["data"]["t"] == t and r["data"]["first"]:
            mid = r["data"]["id"]
            if mid not in msg_depth:
                return None
            return msg_depth[mid] + hops[mid]
    return None
