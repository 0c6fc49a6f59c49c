"""Exactly-once bookkeeping: completion records, client acks and leases.

Two changes from plain RIFL make witness replay safe.  Acknowledgments are
ignored while a recovering master replays witness data (replay order is
arbitrary, so an ack carried by a later request could hide an earlier one),
and a lease may only be expired once everything the master executed has
reached the backups.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

from curpsim.kv import Result


@dataclass(frozen=True, order=True)
class RpcId:
    client_id: int
    seq: int

    def __str__(self) -> str:
        return f"{self.client_id}.{self.seq}"

    def to_json(self) -> list:
        return [self.client_id, self.seq]

    @classmethod
    def from_json(cls, d) -> "RpcId":
        return cls(int(d[0]), int(d[1]))


@dataclass(frozen=True)
class CompletionRecord:
    rpc_id: RpcId
    result: Result
    position: int
    keys: tuple[str, ...] = ()


class Status(enum.Enum):
    NEW = "new"
    COMPLETED = "completed"
    STALE = "stale"


@dataclass
class _ClientEntry:
    acked_up_to: int = 0
    records: dict[int, CompletionRecord] = field(default_factory=dict)
    expired: bool = False


class RiflTable:
    def __init__(self) -> None:
        self.clients: dict[int, _ClientEntry] = {}
        self.replay_mode = False

    def _entry(self, client_id: int) -> _ClientEntry:
        entry = self.clients.get(client_id)
        if entry is None:
            entry = self.clients[client_id] = _ClientEntry()
        return entry

    def check_duplicate(self, rpc_id: RpcId) -> tuple[Status, Optional[CompletionRecord]]:
        entry = self.clients.get(rpc_id.client_id)
        if entry is None:
            return Status.NEW, None
        rec = entry.records.get(rpc_id.seq)
        if rec is not None:
            return Status.COMPLETED, rec
        if entry.expired:
            return Status.STALE, None
        if not self.replay_mode and rpc_id.seq <= entry.acked_up_to:
            return Status.STALE, None
        return Status.NEW, None

    def lookup(self, rpc_id: RpcId) -> Optional[CompletionRecord]:
        entry = self.clients.get(rpc_id.client_id)
        return None if entry is None else entry.records.get(rpc_id.seq)

    def record_completion(self, record: CompletionRecord) -> None:
        entry = self._entry(record.rpc_id.client_id)
        assert record.rpc_id.seq not in entry.records, f"duplicate completion record {record.rpc_id}"
        entry.records[record.rpc_id.seq] = record

    def process_ack(self, client_id: int, acked_up_to: int) -> None:
        if self.replay_mode:
            return
        entry = self._entry(client_id)
        if acked_up_to <= entry.acked_up_to:
            return
        entry.acked_up_to = acked_up_to
        for seq in [s for s in entry.records if s <= acked_up_to]:
            del entry.records[seq]

    def set_replay_mode(self, on: bool) -> None:
        self.replay_mode = on

    def expire(self, client_id: int) -> None:
        """Drop every record of ``client_id``; its later requests are stale.

        Callers must have synced all executed operations first (see
        ``Master.expire_lease``).
        """
        entry = self.clients.get(client_id)
        if entry is None:
            return
        entry.records.clear()
        entry.expired = True

    def records(self) -> list[CompletionRecord]:
        return [r for e in self.clients.values() for r in e.records.values()]
