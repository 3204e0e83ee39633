"""One-sided RDMA messaging between simulated processes.

Every receiver keeps one bounded buffer per sender.  A write that reaches
an open buffer with room is acknowledged by the receiver's NIC immediately;
the receiver's CPU only sees it when it pulls.  Closing a buffer blocks
further writes but keeps what already landed.

Each `open` starts a new generation of the buffer.  A write remembers the
generation it was issued against and lands only if that generation is
still open, so a write issued before a close/reopen cycle never lands in
the reopened buffer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

DEFAULT_CAPACITY = 64

ACCEPTED, REJECTED, FULL = "accepted", "rejected", "full"


@dataclass
class Entry:
    mid: int
    sender: str
    msg: object
    meta: object = None


@dataclass
class RdmaBuffer:
    owner: str
    sender: str
    capacity: int = DEFAULT_CAPACITY
    entries: deque = field(default_factory=deque)
    open: bool = False
    generation: int = 0


class RdmaFabric:
    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self.buffers: dict = {}
        self.dead: set = set()

    def _buf(self, owner, sender) -> RdmaBuffer:
        b = self.buffers.get((owner, sender))
        if b is None:
            b = self.buffers[(owner, sender)] = RdmaBuffer(owner, sender, self.capacity)
        return b

    def open(self, owner: str, peer: str) -> None:
        if owner in self.dead:
            return
        b = self._buf(owner, peer)
        if not b.open:
            b.open = True
            b.generation += 1

    def close(self, owner: str, peer: str) -> None:
        b = self.buffers.get((owner, peer))
        if b is not None:
            b.open = False

    def is_open(self, owner: str, peer: str) -> bool:
        b = self.buffers.get((owner, peer))
        return b is not None and b.open

    def issue(self, sender: str, receiver: str) -> Optional[int]:
        """Generation a write issued now targets, or None if closed."""
        b = self.buffers.get((receiver, sender))
        if b is None or not b.open:
            return None
        return b.generation

    def land(self, sender: str, receiver: str, entry: Entry, generation: Optional[int]) -> str:
        if receiver in self.dead or generation is None:
            return REJECTED
        b = self.buffers.get((receiver, sender))
        if b is None or not b.open or b.generation != generation:
            return REJECTED
        if len(b.entries) >= b.capacity:
            return FULL
        b.entries.append(entry)
        return ACCEPTED

    def send_rdma(self, sender: str, msg, receiver: str, mid: int = 0, meta=None) -> str:
        """Issue and land in one go (no flight time)."""
        return self.land(sender, receiver, Entry(mid, sender, msg, meta), self.issue(sender, receiver))

    def has_pending(self, receiver: str) -> bool:
        return any(b.entries for (o, _), b in self.buffers.items() if o == receiver)

    def pull(self, receiver: str, rng=None) -> list:
        """Deliver every landed entry, FIFO per sender.

        With `rng`, senders are interleaved at random; otherwise sender by
        sender in name order.
        """
        queues = [b.entries for (o, _), b in sorted(self.buffers.items()) if o == receiver and b.entries]
        out = []
        if rng is None:
            for q in queues:
                out.extend(q)
                q.clear()
            return out
        while queues:
            q = queues[rng.randrange(len(queues))]
            out.append(q.popleft())
            queues = [q for q in queues if q]
        return out

    def flush(self, receiver: str) -> list:
        return self.pull(receiver)

    def destroy(self, owner: str) -> None:
        self.dead.add(owner)
        for (o, _), b in self.buffers.items():
            if o == owner:
                b.entries.clear()
                b.open = False
