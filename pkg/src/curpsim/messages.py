"""The closed set of protocol messages exchanged between simulated nodes."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, fields
from typing import Any, Optional

from curpsim.kv import KvOp, Result, Value
from curpsim.rifl import CompletionRecord, RpcId
from curpsim.sim import NodeId


class ReplyError(str, enum.Enum):
    WRONG_WITNESS_VERSION = "WrongWitnessVersion"
    NOT_OWNER = "NotOwner"
    STALE_RPC = "StaleRpc"
    NOT_SYNCED = "NotSynced"


def _plain(v: Any) -> Any:
    if isinstance(v, (NodeId, RpcId)):
        return str(v)
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, (KvOp, Result)):
        return v.to_json()
    if isinstance(v, bytes):
        return len(v)
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v[:8]] + (["..."] if len(v) > 8 else [])
    if isinstance(v, (str, int, float, bool, type(None))):
        return v
    return str(v)


class Payload:
    def summary(self) -> dict:
        d = {"type": type(self).__name__}
        for f in fields(self):
            d[f.name] = _plain(getattr(self, f.name))
        return d


# -- client <-> master ---------------------------------------------------------


@dataclass(frozen=True)
class ClientRequest(Payload):
    """An update (with ``rpc_id``) or a read (``rpc_id`` is None)."""

    op_id: int
    attempt: int
    op: KvOp
    rpc_id: Optional[RpcId] = None
    witness_version: int = 0
    ack: int = 0


@dataclass(frozen=True)
class ClientReply(Payload):
    op_id: int
    attempt: int
    result: Optional[Result] = None
    synced: bool = False
    error: Optional[ReplyError] = None


@dataclass(frozen=True)
class SyncRpc(Payload):
    op_id: int
    attempt: int
    rpc_id: RpcId


@dataclass(frozen=True)
class SyncRpcReply(Payload):
    op_id: int
    attempt: int
    ok: bool


# -- client <-> witness --------------------------------------------------------


@dataclass(frozen=True)
class Record(Payload):
    master_id: NodeId
    key_hashes: tuple[int, ...]
    rpc_id: RpcId
    request: bytes
    op_id: int = 0
    attempt: int = 0


@dataclass(frozen=True)
class RecordReply(Payload):
    op_id: int
    attempt: int
    accepted: bool
    status: str


@dataclass(frozen=True)
class CommuteCheck(Payload):
    op_id: int
    attempt: int
    master_id: NodeId
    key_hashes: tuple[int, ...]


@dataclass(frozen=True)
class CommuteCheckReply(Payload):
    op_id: int
    attempt: int
    commutes: bool


# -- client <-> backup ---------------------------------------------------------


@dataclass(frozen=True)
class ReadBackup(Payload):
    op_id: int
    attempt: int
    key: str


@dataclass(frozen=True)
class ReadBackupReply(Payload):
    op_id: int
    attempt: int
    value: Optional[Value]


# -- master <-> backup ---------------------------------------------------------


@dataclass(frozen=True)
class LogEntry:
    """One position of a master's execution log.

    ``control`` marks entries that are not client operations:
    ``("expire", client_id)`` for a lease expiry and
    ``("install", values, records)`` for objects received by migration.
    """

    position: int
    op: Optional[KvOp] = None
    rpc_id: Optional[RpcId] = None
    result: Optional[Result] = None
    control: Optional[tuple] = None

    def record(self) -> Optional[CompletionRecord]:
        if self.rpc_id is None or self.op is None:
            return None
        return CompletionRecord(self.rpc_id, self.result, self.position, self.op.keys)


@dataclass(frozen=True)
class BackupSync(Payload):
    epoch: int
    batch_id: int
    base: int  # entries replace everything after this position
    entries: tuple[LogEntry, ...]


@dataclass(frozen=True)
class BackupSyncReply(Payload):
    batch_id: int
    ok: bool
    zombie: bool = False
    head: int = 0


@dataclass(frozen=True)
class Restore(Payload):
    req_id: int
    epoch: int


@dataclass(frozen=True)
class RestoreReply(Payload):
    req_id: int
    ok: bool
    entries: tuple[LogEntry, ...] = ()


@dataclass(frozen=True)
class BumpEpoch(Payload):
    req_id: int
    epoch: int


@dataclass(frozen=True)
class BumpEpochReply(Payload):
    req_id: int


# -- master <-> witness --------------------------------------------------------


@dataclass(frozen=True)
class StoredRequest:
    """A request held by a witness, as handed back for replay."""

    rpc_id: RpcId
    key_hashes: tuple[int, ...]
    request: bytes


@dataclass(frozen=True)
class Gc(Payload):
    entries: tuple[tuple[int, RpcId], ...]


@dataclass(frozen=True)
class GcReply(Payload):
    ok: bool
    stale: tuple[StoredRequest, ...] = ()


@dataclass(frozen=True)
class GetRecoveryData(Payload):
    req_id: int


@dataclass(frozen=True)
class RecoveryData(Payload):
    req_id: int
    ok: bool
    requests: tuple[StoredRequest, ...] = ()


# -- coordinator <-> witness -----------------------------------------------------


@dataclass(frozen=True)
class WitnessStart(Payload):
    req_id: int
    master_id: NodeId
    reset: bool = False  # end the current life first


@dataclass(frozen=True)
class WitnessStartReply(Payload):
    req_id: int
    ok: bool


@dataclass(frozen=True)
class WitnessEnd(Payload):
    req_id: int


@dataclass(frozen=True)
class WitnessEndReply(Payload):
    req_id: int


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class KeyRange:
    """Half-open lexicographic key range; ``hi=None`` is unbounded."""

    lo: str = ""
    hi: Optional[str] = None

    def __contains__(self, key: str) -> bool:
        return key >= self.lo and (self.hi is None or key < self.hi)

    def to_json(self) -> list:
        return [self.lo, self.hi]

    def minus(self, other: "KeyRange") -> tuple["KeyRange", ...]:
        """The parts of this range outside ``other``."""
        out = []
        if other.lo > self.lo:
            hi = other.lo if self.hi is None else min(self.hi, other.lo)
            out.append(KeyRange(self.lo, hi))
        if other.hi is not None and (self.hi is None or other.hi < self.hi):
            out.append(KeyRange(max(self.lo, other.hi), self.hi))
        return tuple(r for r in out if r.hi is None or r.lo < r.hi)


@dataclass(frozen=True)
class PartitionConfig:
    partition: int
    ranges: tuple[KeyRange, ...]
    master: NodeId
    epoch: int
    backups: tuple[NodeId, ...]
    witnesses: tuple[NodeId, ...]
    witness_version: int

    def owns(self, key: str) -> bool:
        return any(key in r for r in self.ranges)


@dataclass(frozen=True)
class ConfigFetch(Payload):
    req_id: int


@dataclass(frozen=True)
class ConfigReply(Payload):
    req_id: int
    partitions: tuple[PartitionConfig, ...]


@dataclass(frozen=True)
class Recover(Payload):
    req_id: int
    epoch: int
    backups: tuple[NodeId, ...]
    candidates: tuple[NodeId, ...]  # witnesses that may be replayed
    new_witnesses: tuple[NodeId, ...]
    witness_version: int
    ranges: tuple[KeyRange, ...]


@dataclass(frozen=True)
class RecoveryDone(Payload):
    req_id: int


@dataclass(frozen=True)
class WitnessChange(Payload):
    req_id: int
    witnesses: tuple[NodeId, ...]
    witness_version: int


@dataclass(frozen=True)
class WitnessChangeDone(Payload):
    req_id: int


@dataclass(frozen=True)
class Migrate(Payload):
    req_id: int
    moved: KeyRange
    target: NodeId


@dataclass(frozen=True)
class MigrateData(Payload):
    req_id: int
    moved: KeyRange
    values: tuple[tuple[str, Value], ...]
    records: tuple[CompletionRecord, ...]


@dataclass(frozen=True)
class MigrateDataAck(Payload):
    req_id: int


@dataclass(frozen=True)
class MigrateReady(Payload):
    req_id: int


@dataclass(frozen=True)
class MigrateCommit(Payload):
    req_id: int


@dataclass(frozen=True)
class MigrateCommitAck(Payload):
    req_id: int


@dataclass(frozen=True)
class ExpireLease(Payload):
    req_id: int
    client_id: int


@dataclass(frozen=True)
class ExpireLeaseDone(Payload):
    req_id: int


# -- request encoding stored by witnesses ----------------------------------------


def encode_request(req: ClientRequest) -> bytes:
    return json.dumps(
        {"op": req.op.to_json(), "rpc": req.rpc_id.to_json(), "ver": req.witness_version, "ack": req.ack},
        sort_keys=True,
    ).encode()


def decode_request(data: bytes) -> ClientRequest:
    d = json.loads(data)
    return ClientRequest(op_id=0, attempt=0, op=KvOp.from_json(d["op"]), rpc_id=RpcId.from_json(d["rpc"]),
                         witness_version=d["ver"], ack=d["ack"])
