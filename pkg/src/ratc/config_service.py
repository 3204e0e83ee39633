"""The reliable configuration service.

Per-shard mode keeps one sequence of configurations per shard.  Global mode
keeps a single sequence under the key ``GLOBAL``; every entry carries the
membership and leader of every shard.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .messages import ConfigChange, CsCas, CsGet, CsGetLast, CsReply

GLOBAL = "*"


@dataclass(frozen=True)
class Configuration:
    epoch: int
    members: frozenset
    leader: str

    def __post_init__(self):
        if self.epoch < 1:
            raise ValueError("epochs start at 1")
        if self.leader not in self.members:
            raise ValueError("leader must be a member")


@dataclass(frozen=True)
class GlobalConfiguration:
    epoch: int
    members: tuple      # ((shard, frozenset(pids)), ...) sorted by shard
    leaders: tuple      # ((shard, pid), ...) sorted by shard

    def __post_init__(self):
        if self.epoch < 1:
            raise ValueError("epochs start at 1")
        ms = dict(self.members)
        for s, p in self.leaders:
            if p not in ms.get(s, ()):
                raise ValueError(f"leader of {s} must be one of its members")

    @classmethod
    def build(cls, epoch, members: dict, leaders: dict) -> "GlobalConfiguration":
        return cls(epoch,
                   tuple(sorted((s, frozenset(m)) for s, m in members.items())),
                   tuple(sorted(leaders.items())))

    def members_of(self, s: str) -> frozenset:
        return dict(self.members)[s]

    def leader_of(self, s: str) -> str:
        return dict(self.leaders)[s]

    def everyone(self) -> frozenset:
        out = set()
        for _, m in self.members:
            out |= m
        return frozenset(out)

    def shard(self, s: str) -> Configuration:
        return Configuration(self.epoch, self.members_of(s), self.leader_of(s))


class UnknownEpoch(LookupError):
    pass


class ConfigService:
    def __init__(self, bootstrap: dict | GlobalConfiguration):
        if isinstance(bootstrap, GlobalConfiguration):
            self.mode = "global"
            self.sequences = {GLOBAL: [bootstrap]}
        else:
            self.mode = "per-shard"
            self.sequences = {s: [c] for s, c in sorted(bootstrap.items())}
        self.oplog: list = []

    def keys(self) -> list:
        return list(self.sequences)

    def get_last(self, key: str):
        return self.sequences[key][-1]

    def get(self, key: str, epoch: int):
        for c in self.sequences[key]:
            if c.epoch == epoch:
                return c
        raise UnknownEpoch(f"no configuration with epoch {epoch} for {key}")

    def compare_and_swap(self, key: str, expected_epoch: int, cfg) -> bool:
        if cfg.epoch <= expected_epoch:
            raise ValueError("new configuration must carry a higher epoch")
        seq = self.sequences[key]
        if seq[-1].epoch != expected_epoch:
            return False
        seq.append(cfg)
        return True

    def broadcast_config_change(self, s: str, cfg: Configuration) -> list:
        out = []
        for other, seq in self.sequences.items():
            if other == s:
                continue
            for p in sorted(seq[-1].members):
                out.append((p, ConfigChange(s, cfg.epoch, cfg.members, cfg.leader)))
        return out

    def handle(self, src: str, msg) -> list:
        """Serve one request; returns ``[(dst, message), ...]``."""
        if isinstance(msg, CsGetLast):
            res = self.get_last(msg.key)
            self.oplog.append(("get_last", src, msg.key, res.epoch, None))
            return [(src, CsReply("get_last", msg.key, res))]
        if isinstance(msg, CsGet):
            res = self.get(msg.key, msg.epoch)
            self.oplog.append(("get", src, msg.key, msg.epoch, None))
            return [(src, CsReply("get", msg.key, res))]
        if isinstance(msg, CsCas):
            ok = self.compare_and_swap(msg.key, msg.expected, msg.config)
            self.oplog.append(("cas", src, msg.key, msg.expected, msg.config if ok else None))
            out = [(src, CsReply("cas", msg.key, ok))]
            if ok and self.mode == "per-shard":
                out += self.broadcast_config_change(msg.key, msg.config)
            return out
        raise TypeError(f"configuration service cannot handle {msg!r}")


def per_shard_bootstrap(layout: dict) -> dict:
    """``{shard: [leader, follower, ...]}`` -> epoch-1 configurations."""
    return {s: Configuration(1, frozenset(ps), ps[0]) for s, ps in layout.items()}


def global_bootstrap(layout: dict) -> GlobalConfiguration:
    return GlobalConfiguration.build(1, {s: ps for s, ps in layout.items()},
                                     {s: ps[0] for s, ps in layout.items()})


def all_processes(layout: dict) -> Iterable[str]:
    for s in sorted(layout):
        yield from layout[s]
