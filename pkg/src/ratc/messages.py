"""Protocol messages.

Field order follows the wire layout used by both protocol variants.  RDMA
variants reuse `Accept`/`Decision` with ``epoch=None`` because those travel
through one-sided writes and carry no epoch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .certification import Decision, Payload


@dataclass(frozen=True)
class Prepare:
    t: str
    payload: Optional[Payload]      # None stands for the retry marker ⊥


@dataclass(frozen=True)
class PrepareAck:
    epoch: int
    shard: str
    k: int
    t: str
    payload: Payload
    vote: Decision


@dataclass(frozen=True)
class Accept:
    epoch: Optional[int]
    k: int
    t: str
    payload: Payload
    vote: Decision


@dataclass(frozen=True)
class AcceptAck:
    shard: str
    epoch: int
    k: int
    t: str
    vote: Decision


@dataclass(frozen=True)
class DecisionClient:
    t: str
    decision: Decision


@dataclass(frozen=True)
class ShardDecision:
    epoch: Optional[int]
    k: int
    decision: Decision


@dataclass(frozen=True)
class Probe:
    epoch: int


@dataclass(frozen=True)
class ProbeAck:
    initialized: bool
    epoch: int
    shard: str


@dataclass(frozen=True)
class NewConfig:
    epoch: int
    members: Optional[frozenset]    # None in the RDMA variant


@dataclass(frozen=True)
class NewState:
    epoch: int
    members: Optional[frozenset]
    log: tuple                      # ((k, Slot), ...) sorted by k


@dataclass(frozen=True)
class ConfigChange:
    shard: str
    epoch: int
    members: frozenset
    leader: str


@dataclass(frozen=True)
class ConfigPrepare:
    epoch: int
    members: tuple                  # ((shard, frozenset), ...)
    leaders: tuple                  # ((shard, pid), ...)


@dataclass(frozen=True)
class ConfigPrepareAck:
    epoch: int


@dataclass(frozen=True)
class Connect:
    epoch: int


@dataclass(frozen=True)
class ConnectAck:
    epoch: int


# configuration service requests and replies

@dataclass(frozen=True)
class CsGetLast:
    key: str


@dataclass(frozen=True)
class CsGet:
    key: str
    epoch: int


@dataclass(frozen=True)
class CsCas:
    key: str
    expected: int
    config: object


@dataclass(frozen=True)
class CsReply:
    op: str
    key: str
    result: object


MESSAGE_TYPES = (
    Prepare, PrepareAck, Accept, AcceptAck, DecisionClient, ShardDecision,
    Probe, ProbeAck, NewConfig, NewState, ConfigChange, ConfigPrepare,
    ConfigPrepareAck, Connect, ConnectAck, CsGetLast, CsGet, CsCas, CsReply,
)

KIND = {
    Prepare: "PREPARE", PrepareAck: "PREPARE_ACK", Accept: "ACCEPT",
    AcceptAck: "ACCEPT_ACK", DecisionClient: "DECISION_CLIENT",
    ShardDecision: "DECISION", Probe: "PROBE", ProbeAck: "PROBE_ACK",
    NewConfig: "NEW_CONFIG", NewState: "NEW_STATE", ConfigChange: "CONFIG_CHANGE",
    ConfigPrepare: "CONFIG_PREPARE", ConfigPrepareAck: "CONFIG_PREPARE_ACK",
    Connect: "CONNECT", ConnectAck: "CONNECT_ACK", CsGetLast: "CS_GET_LAST",
    CsGet: "CS_GET", CsCas: "CS_CAS", CsReply: "CS_REPLY",
}


def kind_of(msg) -> str:
    return KIND[type(msg)]
