"""Backups: the ordered, crash-surviving copy of a master's log."""

from __future__ import annotations

import enum
from typing import Iterable, Optional

from curpsim.kv import KvState
from curpsim.messages import (
    BackupSync,
    BackupSyncReply,
    BumpEpoch,
    BumpEpochReply,
    LogEntry,
    ReadBackup,
    ReadBackupReply,
    Restore,
    RestoreReply,
)
from curpsim.rifl import RiflTable
from curpsim.sim import Node, NodeId


class SyncStatus(enum.Enum):
    ACK = "ack"
    REJECTED_ZOMBIE = "rejected_zombie"
    GAP = "gap"


def apply_entry(kv: KvState, rifl: RiflTable, entry: LogEntry) -> None:
    """Replay one logged position into ``kv`` and ``rifl``."""
    if entry.control is None:
        kv.apply(entry.op, entry.position)
        rec = entry.record()
        if rec is not None and rifl.lookup(rec.rpc_id) is None:
            rifl.record_completion(rec)
        return
    kind = entry.control[0]
    if kind == "expire":
        kv.advance(entry.position)
        rifl.expire(entry.control[1])
    elif kind == "install":
        _, values, records = entry.control
        kv.install(dict(values), entry.position)
        for rec in records:
            if rifl.lookup(rec.rpc_id) is None:
                rifl.record_completion(rec)
    else:
        raise ValueError(f"unknown control entry {kind!r}")


def replay_log(entries: Iterable[LogEntry]) -> tuple[KvState, RiflTable, int]:
    kv, rifl = KvState(), RiflTable()
    head = 0
    for e in entries:
        apply_entry(kv, rifl, e)
        head = e.position
    return kv, rifl, head


class BackupState:
    def __init__(self) -> None:
        self.log: list[LogEntry] = []
        self.accepted_epoch = 0
        self.log_epoch = 0  # epoch of the master that last wrote the log
        self.kv = KvState()  # materialised view, for reads from backups
        self._rifl = RiflTable()

    @property
    def head(self) -> int:
        return len(self.log)

    def bump_epoch(self, epoch: int) -> None:
        self.accepted_epoch = max(self.accepted_epoch, epoch)

    def handle_sync(self, epoch: int, base: int, entries: Iterable[LogEntry]) -> SyncStatus:
        if epoch < self.accepted_epoch:
            return SyncStatus.REJECTED_ZOMBIE
        self.accepted_epoch = epoch
        if epoch > self.log_epoch:
            # A new master rewrites everything past ``base``.
            if base > len(self.log):
                return SyncStatus.GAP
            if base < len(self.log):
                del self.log[base:]
                self.kv, self._rifl, _ = replay_log(self.log)
            self.log_epoch = epoch
        for e in entries:
            if e.position <= len(self.log):
                continue
            if e.position != len(self.log) + 1:
                return SyncStatus.GAP
            self.log.append(e)
            apply_entry(self.kv, self._rifl, e)
        return SyncStatus.ACK

    def restore(self) -> tuple[KvState, RiflTable, int]:
        return replay_log(self.log)

    def check_invariants(self) -> None:
        for i, e in enumerate(self.log, start=1):
            assert e.position == i, f"log position {e.position} at slot {i}"


class Backup(Node):
    def __init__(self, node_id: NodeId):
        super().__init__(node_id)
        self.state = BackupState()  # persisted: survives crashes
        self.syncs_handled = 0

    def on_BackupSync(self, src: NodeId, m: BackupSync) -> None:
        self.syncs_handled += 1
        status = self.state.handle_sync(m.epoch, m.base, m.entries)
        if status is SyncStatus.REJECTED_ZOMBIE:
            self.event("zombie_sync_rejected", master=str(src), epoch=m.epoch,
                       accepted=self.state.accepted_epoch)
        self.send(src, BackupSyncReply(m.batch_id, status is SyncStatus.ACK,
                                       status is SyncStatus.REJECTED_ZOMBIE, self.state.head))

    def on_Restore(self, src: NodeId, m: Restore) -> None:
        if m.epoch < self.state.accepted_epoch:
            self.send(src, RestoreReply(m.req_id, False))
            return
        self.state.bump_epoch(m.epoch)
        self.send(src, RestoreReply(m.req_id, True, tuple(self.state.log)))

    def on_BumpEpoch(self, src: NodeId, m: BumpEpoch) -> None:
        self.state.bump_epoch(m.epoch)
        self.send(src, BumpEpochReply(m.req_id))

    def on_ReadBackup(self, src: NodeId, m: ReadBackup) -> None:
        self.send(src, ReadBackupReply(m.op_id, m.attempt, self.state.kv.value(m.key)))
