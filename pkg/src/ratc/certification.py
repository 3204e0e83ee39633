"""Transaction payloads, decisions and certification functions.

A payload records what an optimistically executed transaction read (object
and version), what it wants to write (object and value) and the version its
writes will carry if it commits.  Certification functions decide whether a
payload can commit given a set of other payloads.  The serializability
instance ships here; other isolation levels can implement `Certifier`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping


class Decision(str, Enum):
    COMMIT = "COMMIT"
    ABORT = "ABORT"

    def __and__(self, other: "Decision") -> "Decision":
        return meet(self, other)


COMMIT = Decision.COMMIT
ABORT = Decision.ABORT


def meet(d1: Decision, d2: Decision) -> Decision:
    """ABORT if either side aborts."""
    if d1 is ABORT or d2 is ABORT:
        return ABORT
    return COMMIT


def meet_all(decisions: Iterable[Decision]) -> Decision:
    return ABORT if any(d is ABORT for d in decisions) else COMMIT


def weaker_or_equal(x: Decision, y: Decision) -> bool:
    """Vote-bound order: x may equal y, or x may be ABORT where y is COMMIT."""
    return x is y or (x is ABORT and y is COMMIT)


@dataclass(frozen=True)
class Payload:
    reads: frozenset = field(default_factory=frozenset)    # {(obj, version)}
    writes: frozenset = field(default_factory=frozenset)   # {(obj, value)}
    commit_version: int = 0

    @classmethod
    def make(cls, reads: Mapping[str, int] | None = None,
             writes: Mapping[str, str] | None = None,
             commit_version: int | None = None) -> "Payload":
        reads = dict(reads or {})
        writes = dict(writes or {})
        if commit_version is None:
            commit_version = 1 + max(reads.values(), default=0)
        p = cls(frozenset(reads.items()), frozenset(writes.items()), commit_version)
        p.validate()
        return p

    @property
    def is_empty(self) -> bool:
        return not self.reads and not self.writes

    def read_objects(self) -> set:
        return {x for x, _ in self.reads}

    def written_objects(self) -> set:
        return {x for x, _ in self.writes}

    def objects(self) -> set:
        return self.read_objects() | self.written_objects()

    def validate(self) -> None:
        read_objs = [x for x, _ in self.reads]
        if len(read_objs) != len(set(read_objs)):
            raise ValueError("payload reads one object at two versions")
        write_objs = [x for x, _ in self.writes]
        if len(write_objs) != len(set(write_objs)):
            raise ValueError("payload writes one object twice")
        if not set(write_objs) <= set(read_objs):
            raise ValueError("every written object must also be read")
        if any(v >= self.commit_version for _, v in self.reads):
            raise ValueError("commit version must exceed every read version")

    def __repr__(self) -> str:
        if self.is_empty:
            return "Payload(ε)"
        r = ",".join(f"{x}@{v}" for x, v in sorted(self.reads))
        w = ",".join(f"{x}={v}" for x, v in sorted(self.writes))
        return f"Payload(r={r}; w={w}; vc={self.commit_version})"


EMPTY = Payload()


class ShardMap:
    """Object -> shard ownership.

    Objects are looked up in an explicit table first; unknown names fall
    back to a prefix convention so generated workloads can invent objects
    freely: ``s2:x7`` belongs to shard ``s2``.
    """

    def __init__(self, table: Mapping[str, str] | None = None, shards: Iterable[str] = ()):
        self.table = dict(table or {})
        self.shards = tuple(sorted(set(shards) | set(self.table.values())))

    def shard_of(self, obj: str) -> str:
        s = self.table.get(obj)
        if s is not None:
            return s
        head, sep, _ = obj.partition(":")
        if sep:
            return head
        raise KeyError(f"object {obj!r} has no owning shard")

    def objects_of(self, shard: str) -> set:
        return {x for x, s in self.table.items() if s == shard}


def project(l: Payload, s: str, m: ShardMap) -> Payload:
    reads = frozenset((x, v) for x, v in l.reads if m.shard_of(x) == s)
    writes = frozenset((x, v) for x, v in l.writes if m.shard_of(x) == s)
    if reads == l.reads and writes == l.writes:
        return l
    return Payload(reads, writes, l.commit_version)


def shards_of(l: Payload, m: ShardMap) -> frozenset:
    return frozenset(m.shard_of(x) for x in l.objects())


class Certifier:
    """Interface for a family of certification functions.

    `certify_global` is the system-wide function; the two shard-local
    functions check a payload against committed and prepared payloads.
    """

    def __init__(self, shard_map: ShardMap):
        self.shard_map = shard_map

    def certify_global(self, L: Iterable[Payload], l: Payload) -> Decision:
        raise NotImplementedError

    def certify_committed_local(self, s: str, L: Iterable[Payload], l: Payload) -> Decision:
        raise NotImplementedError

    def certify_prepared_local(self, s: str, L: Iterable[Payload], l: Payload) -> Decision:
        raise NotImplementedError


class Serializability(Certifier):
    """Serializability via version checks.

    A payload commits against committed ones if no committed writer of an
    object it read carries a newer commit version than the version read.
    Against prepared payloads the check is stricter: any read/write overlap
    aborts.
    """

    def certify_global(self, L, l):
        reads = dict(l.reads)
        if not reads:
            return COMMIT
        for other in L:
            for x, _ in other.writes:
                v = reads.get(x)
                if v is not None and other.commit_version > v:
                    return ABORT
        return COMMIT

    def certify_committed_local(self, s, L, l):
        owner = self.shard_map.shard_of
        reads = {x: v for x, v in l.reads if owner(x) == s}
        if not reads:
            return COMMIT
        for other in L:
            for x, _ in other.writes:
                v = reads.get(x)
                if v is not None and other.commit_version > v:
                    return ABORT
        return COMMIT

    def certify_prepared_local(self, s, L, l):
        owner = self.shard_map.shard_of
        my_reads = {x for x, _ in l.reads if owner(x) == s}
        my_writes = {x for x, _ in l.writes if owner(x) == s}
        if not my_reads and not my_writes:
            return COMMIT
        for other in L:
            if my_reads and any(x in my_reads for x, _ in other.writes):
                return ABORT
            if my_writes and any(x in my_writes for x, _ in other.reads):
                return ABORT
        return COMMIT
