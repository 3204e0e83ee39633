import random

import pytest

from ratc.certification import Payload, Serializability, ShardMap
from ratc.config_service import per_shard_bootstrap
from ratc.protocol_mp import FreshPool, MPReplica, TxnInfo

OBJECTS = ("s1:x", "s1:y", "s2:x", "s2:y", "s3:z")


def random_payload(rng: random.Random, objects=OBJECTS, max_version=3) -> Payload:
    objs = rng.sample(objects, rng.randint(0, 3))
    reads = {x: rng.randint(0, max_version) for x in objs}
    writes = {x: rng.choice("abc") for x in objs if rng.random() < 0.6}
    vc = 1 + max(reads.values(), default=0) + rng.randint(0, 2)
    return Payload.make(reads, writes, vc)


def sent(proc, kind=None):
    """Messages in a replica's outbox, optionally filtered by type."""
    return [(dst, msg) for tag, dst, msg, *_ in (o for o in proc.out if o[0] == "send")
            if kind is None or isinstance(msg, kind)]


class MPCluster:
    """A handful of MP replicas wired together by hand (no simulator)."""

    def __init__(self, layout=None, pools=None):
        self.layout = layout or {"s1": ["p1", "p2"], "s2": ["p3", "p4"]}
        self.shard_map = ShardMap(shards=self.layout)
        self.cert = Serializability(self.shard_map)
        self.registry = {}
        self.pool = FreshPool(pools or {s: [] for s in self.layout})
        boot = per_shard_bootstrap(self.layout)
        self.procs = {}
        for s, ps in self.layout.items():
            for p in list(ps) + list((pools or {}).get(s, [])):
                self.procs[p] = MPReplica(p, s, self.cert, self.registry, self.pool, len(ps), boot)

    def register(self, t, payload, client="c1"):
        from ratc.certification import shards_of
        self.registry[t] = TxnInfo(payload, shards_of(payload, self.shard_map), client)

    def __getitem__(self, p):
        return self.procs[p]


@pytest.fixture
def cluster():
    return MPCluster()
