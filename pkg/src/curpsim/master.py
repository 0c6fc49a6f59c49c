"""Master state machine.

A master executes updates in arrival order and normally answers before the
operation reaches the backups.  That speculative reply is only allowed when
the operation touches no object that is itself still unsynced; otherwise the
reply is held until a sync covers it.  Syncs are batched (at most
``batch_limit`` operations wait for one), one sync is outstanding at a time,
and each completed sync is followed by a gc RPC to every witness.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Callable, Optional

from curpsim.backup import replay_log
from curpsim.kv import KvOp, KvState, Result, is_unsynced, key_hash
from curpsim.messages import (
    BackupSync,
    BackupSyncReply,
    ClientReply,
    ClientRequest,
    CompletionRecord,
    ExpireLease,
    ExpireLeaseDone,
    Gc,
    GcReply,
    GetRecoveryData,
    KeyRange,
    LogEntry,
    Migrate,
    MigrateCommit,
    MigrateCommitAck,
    MigrateData,
    MigrateDataAck,
    MigrateReady,
    Recover,
    RecoveryData,
    RecoveryDone,
    ReplyError,
    Restore,
    RestoreReply,
    StoredRequest,
    SyncRpc,
    SyncRpcReply,
    WitnessChange,
    WitnessChangeDone,
    WitnessStart,
    WitnessStartReply,
    decode_request,
)
from curpsim.rifl import RiflTable, RpcId, Status
from curpsim.sim import Node, NodeId

BATCH_LIMIT = 50

ReplyTo = tuple[NodeId, int, int]  # client, op_id, attempt


@dataclass
class _Unsynced:
    entry: LogEntry
    speculative: bool = False  # replied before being synced


@dataclass
class _Batch:
    batch_id: int
    base: int
    entries: tuple[LogEntry, ...]
    units: list[_Unsynced]
    gc_after: list[tuple[int, RpcId]]
    acked: set[NodeId] = field(default_factory=set)


class Master(Node):
    def __init__(
        self,
        node_id: NodeId,
        *,
        coordinator: NodeId,
        backups: tuple[NodeId, ...],
        witnesses: tuple[NodeId, ...] = (),
        witness_version: int = 0,
        epoch: int = 1,
        ranges: tuple[KeyRange, ...] = (KeyRange(),),
        batch_limit: int = BATCH_LIMIT,
        preemptive_sync: bool = True,
        retry_ticks: int = 20,
        recovering: bool = False,
    ):
        super().__init__(node_id)
        self.coordinator = coordinator
        self.backups = tuple(backups)
        self.witnesses = tuple(witnesses)
        self.witness_version = witness_version
        self.epoch = epoch
        self.ranges = tuple(ranges)
        self.batch_limit = batch_limit
        self.preemptive_sync = preemptive_sync
        self.retry_ticks = retry_ticks

        self.kv = KvState()
        self.rifl = RiflTable()
        self.log: list[LogEntry] = []
        self.sync_point = 0
        self.pending: list[_Unsynced] = []
        self.inflight: Optional[_Batch] = None
        self.blocked: dict[int, list[ReplyTo]] = {}
        self.waiters: list[tuple[int, Callable[[], None]]] = []
        self.want_sync = False
        self.full_sync = False
        self.deferred_gc: list[tuple[int, RpcId]] = []
        self.queue: collections.deque = collections.deque()
        self.pauses: set[str] = set()
        self.recovering = recovering
        self.dead = False
        self._draining = False
        self._batch_ids = 0
        self._recovery: Optional[Recover] = None
        self._recovery_src: Optional[NodeId] = None
        self._recovery_done = False
        self._handled: dict[tuple[str, int], object] = {}
        self._migration: Optional[dict] = None
        self.rng = None

        self.updates_received = 0
        self.reads_received = 0
        self.backup_rpcs = 0
        self.gc_rpcs = 0
        self.syncs = 0

    def attach(self, sim) -> None:
        super().attach(sim)
        self.rng = sim.node_rng(self.id)

    @property
    def log_head(self) -> int:
        return len(self.log)

    @property
    def active(self) -> bool:
        return not (self.dead or self.recovering or self.pauses)

    def owns(self, keys) -> bool:
        return all(any(k in r for r in self.ranges) for k in keys)

    def on_crash(self) -> None:
        self.dead = True  # a crashed master never serves again

    # -- client requests ----------------------------------------------------

    def on_ClientRequest(self, src: NodeId, m: ClientRequest) -> None:
        if self.dead:
            return
        if m.op.is_update:
            self.updates_received += 1
        else:
            self.reads_received += 1
        if not self.active or self.queue or (m.op.is_update and len(self.pending) >= self.batch_limit):
            self.queue.append((src, m))
            if len(self.pending) >= self.batch_limit:
                self.want_sync = True
                self._maybe_sync()
            return
        self._handle_request(src, m)

    def _reply(self, to: ReplyTo, result: Optional[Result] = None, synced: bool = False,
               error: Optional[ReplyError] = None) -> None:
        self.send(to[0], ClientReply(to[1], to[2], result, synced, error))

    def _handle_request(self, src: NodeId, m: ClientRequest) -> None:
        to = (src, m.op_id, m.attempt)
        op = m.op
        if not self.owns(op.keys):
            self._reply(to, error=ReplyError.NOT_OWNER)
            return
        if not op.is_update:
            result = self.kv.apply(op, 0)
            if is_unsynced(self.kv, op.keys, self.sync_point):
                # Never expose a value the backups might lose.
                self.wait_for_sync(self.log_head, lambda: self._reply(to, result, True))
            else:
                self._reply(to, result, True)
            return
        if m.witness_version != self.witness_version:
            self._reply(to, error=ReplyError.WRONG_WITNESS_VERSION)
            return
        self.rifl.process_ack(m.rpc_id.client_id, m.ack)
        status, rec = self.rifl.check_duplicate(m.rpc_id)
        if status is Status.COMPLETED:
            self._reply_duplicate(rec, to)
        elif status is Status.STALE:
            self._reply(to, error=ReplyError.STALE_RPC)
        else:
            self.event("execute", rpc=str(m.rpc_id), version=self.witness_version, epoch=self.epoch)
            self.execute(op, m.rpc_id, to)

    def _reply_duplicate(self, rec: CompletionRecord, to: ReplyTo) -> None:
        if rec.position <= self.sync_point:
            self._reply(to, rec.result, True)
        elif rec.position in self.blocked:
            self.blocked[rec.position].append(to)
        else:
            self._reply(to, rec.result, False)

    def execute(self, op: KvOp, rpc_id: RpcId, reply_to: Optional[ReplyTo] = None) -> LogEntry:
        """Execute a new update at the next log position.

        The reply is speculative unless the operation touches an unsynced
        object, in which case it waits for a sync.
        """
        conflict = is_unsynced(self.kv, op.keys, self.sync_point)
        prev = max(self.kv.last_update(k) for k in op.keys)
        pos = self.log_head + 1
        result = self.kv.apply(op, pos)
        entry = LogEntry(pos, op, rpc_id, result)
        self.log.append(entry)
        self.rifl.record_completion(entry.record())
        unit = _Unsynced(entry)
        self.pending.append(unit)
        if conflict:
            self.want_sync = True
            if reply_to is not None:
                self.blocked.setdefault(pos, []).append(reply_to)
        elif reply_to is not None:
            unit.speculative = True
            self._reply(reply_to, result, False)
            if self.preemptive_sync and prev > 0 and pos - prev <= 2 * self.batch_limit:
                self.want_sync = True
        if len(self.pending) >= self.batch_limit:
            self.want_sync = True
        self._maybe_sync()
        return entry

    def on_SyncRpc(self, src: NodeId, m: SyncRpc) -> None:
        if self.dead:
            return
        if self.recovering:
            self.queue.append((src, m))
            return
        if self.rifl.lookup(m.rpc_id) is None:
            self.send(src, SyncRpcReply(m.op_id, m.attempt, False))
            return
        self.wait_for_sync(self.log_head, lambda: self.send(src, SyncRpcReply(m.op_id, m.attempt, True)))

    # -- syncing to backups -------------------------------------------------

    def wait_for_sync(self, target: int, then: Callable[[], None]) -> None:
        if target <= self.sync_point:
            then()
            return
        self.waiters.append((target, then))
        self.want_sync = True
        self._maybe_sync()

    def _sync_needed(self) -> bool:
        return (self.want_sync or self.full_sync or bool(self.blocked)
                or len(self.pending) >= self.batch_limit
                or any(t > self.sync_point for t, _ in self.waiters))

    def _maybe_sync(self) -> None:
        if self.inflight is not None or self.dead or not self._sync_needed():
            return
        if not self.pending and not self.full_sync:
            self.want_sync = False
            if self.deferred_gc:
                self._send_gc(self.deferred_gc)
                self.deferred_gc = []
            self._release_waiters()
            return
        self._batch_ids += 1
        if self.full_sync:
            base, entries = 0, tuple(self.log)
        else:
            base, entries = self.sync_point, tuple(u.entry for u in self.pending)
        batch = _Batch(self._batch_ids, base, entries, self.pending, self.deferred_gc)
        self.pending, self.deferred_gc = [], []
        self.want_sync = self.full_sync = False
        self.inflight = batch
        self._send_batch(batch)
        self._drain_queue()

    def _send_batch(self, batch: _Batch) -> None:
        for b in self.backups:
            if b not in batch.acked:
                self.backup_rpcs += 1
                self.send(b, BackupSync(self.epoch, batch.batch_id, batch.base, batch.entries))
        self.after(self.retry_ticks, lambda: self._resend_batch(batch.batch_id))

    def _resend_batch(self, batch_id: int) -> None:
        if self.inflight is not None and self.inflight.batch_id == batch_id and not self.dead:
            self._send_batch(self.inflight)

    def on_BackupSyncReply(self, src: NodeId, m: BackupSyncReply) -> None:
        batch = self.inflight
        if self.dead or batch is None or m.batch_id != batch.batch_id:
            return
        if m.zombie:
            self.dead = True
            self.event("zombie_detected", epoch=self.epoch)
            return
        if not m.ok:
            # The backup missed earlier positions; give it the whole log.
            self.backup_rpcs += 1
            self.send(src, BackupSync(self.epoch, batch.batch_id, 0, tuple(self.log[: batch.entries[-1].position])
                                      if batch.entries else ()))
            return
        batch.acked.add(src)
        if batch.acked >= set(self.backups):
            self._sync_done(batch)

    def _sync_done(self, batch: _Batch) -> None:
        self.inflight = None
        self.syncs += 1
        if batch.entries:
            self.sync_point = max(self.sync_point, batch.entries[-1].position)
        gc = [(h, e.rpc_id) for u in batch.units for e in (u.entry,)
              if e.rpc_id is not None and e.op is not None for h in e.op.key_hashes]
        gc += batch.gc_after
        if gc:
            self._send_gc(gc)
        for pos in sorted(self.blocked):
            if pos > self.sync_point:
                break
            result = self.log[pos - 1].result
            for to in self.blocked.pop(pos):
                self._reply(to, result, True)
        self._release_waiters()
        self._drain_queue()
        self._maybe_sync()

    def _release_waiters(self) -> None:
        ready = [w for w in self.waiters if w[0] <= self.sync_point]
        self.waiters = [w for w in self.waiters if w[0] > self.sync_point]
        for _, then in ready:
            then()

    def _drain_queue(self) -> None:
        if self._draining:
            return
        self._draining = True
        try:
            while self.queue and self.active:
                src, m = self.queue[0]
                if isinstance(m, ClientRequest) and m.op.is_update and len(self.pending) >= self.batch_limit:
                    self.want_sync = True
                    self._maybe_sync()
                    if len(self.pending) >= self.batch_limit:
                        break
                self.queue.popleft()
                if isinstance(m, SyncRpc):
                    self.on_SyncRpc(src, m)
                else:
                    self._handle_request(src, m)
        finally:
            self._draining = False

    # -- witness garbage collection ----------------------------------------

    def _send_gc(self, entries: list[tuple[int, RpcId]]) -> None:
        payload = Gc(tuple(entries))
        for w in self.witnesses:
            self.gc_rpcs += 1
            self.send(w, payload)

    def on_GcReply(self, src: NodeId, m: GcReply) -> None:
        if not m.ok or not self.active or src not in self.witnesses:
            return
        for sr in m.stale:
            self._retry_stale(sr)

    def _retry_stale(self, sr: StoredRequest) -> None:
        pairs = [(h, sr.rpc_id) for h in sr.key_hashes]
        req = decode_request(sr.request)
        if not self.owns(req.op.keys):
            self._send_gc(pairs)
            return
        status, rec = self.rifl.check_duplicate(sr.rpc_id)
        if status is Status.COMPLETED:
            if rec.position <= self.sync_point:
                self._send_gc(pairs)
            # otherwise its own batch will collect it
        elif status is Status.STALE:
            # Acked or expired: executed, but maybe not synced yet.
            if self.inflight is None and not self.pending:
                self._send_gc(pairs)
            elif not self.pending:
                self.inflight.gc_after.extend(pairs)
            else:
                self.deferred_gc.extend(pairs)
                self.want_sync = True
                self._maybe_sync()
        elif len(self.pending) < self.batch_limit:
            self.event("execute_stale", rpc=str(sr.rpc_id))
            self.execute(req.op, sr.rpc_id)
            self.want_sync = True
            self._maybe_sync()

    # -- leases -----------------------------------------------------------------

    def on_ExpireLease(self, src: NodeId, m: ExpireLease) -> None:
        key = ("expire", m.req_id)
        if key in self._handled:
            if self._handled[key]:
                self.send(src, ExpireLeaseDone(m.req_id))
            return
        self._handled[key] = False
        self.expire_lease(m.client_id, lambda: self._done(key, src, ExpireLeaseDone(m.req_id)))

    def expire_lease(self, client_id: int, then: Optional[Callable[[], None]] = None) -> None:
        """Drop ``client_id``'s completion records once everything is synced."""

        def expire() -> None:
            pos = self.log_head + 1
            entry = LogEntry(pos, control=("expire", client_id))
            self.log.append(entry)
            self.kv.advance(pos)
            self.pending.append(_Unsynced(entry))
            self.rifl.expire(client_id)
            self.event("lease_expired", client=client_id, sync_point=self.sync_point)
            if then is not None:
                then()

        self.wait_for_sync(self.log_head, expire)

    def _done(self, key: tuple[str, int], dst: NodeId, payload) -> None:
        self._handled[key] = True
        self.send(dst, payload)

    # -- witness reconfiguration --------------------------------------------

    def on_WitnessChange(self, src: NodeId, m: WitnessChange) -> None:
        if self.dead or self.recovering:
            return
        if m.witness_version <= self.witness_version:
            self.send(src, WitnessChangeDone(m.req_id))
            return
        key = ("witness_change", m.req_id)
        if key in self._handled:
            return
        self._handled[key] = False
        self.pauses.add("witness_change")

        def install() -> None:
            self.witnesses = m.witnesses
            self.witness_version = m.witness_version
            self.pauses.discard("witness_change")
            self.event("witness_list_installed", version=m.witness_version,
                       witnesses=[str(w) for w in m.witnesses])
            self._done(key, src, WitnessChangeDone(m.req_id))
            self._drain_queue()

        self.wait_for_sync(self.log_head, install)

    # -- migration ---------------------------------------------------------------

    def on_Migrate(self, src: NodeId, m: Migrate) -> None:
        if self.dead or self.recovering:
            return
        key = ("migrate", m.req_id)
        if key in self._handled:
            return
        self._handled[key] = False
        self.pauses.add("migrate")
        self._migration = {"req": m, "coordinator": src, "resets": {}, "data_req": None}
        self.wait_for_sync(self.log_head, self._reset_witnesses)

    def _reset_witnesses(self) -> None:
        mig = self._migration
        for w in self.witnesses:
            req_id = self.next_req_id()
            mig["resets"][req_id] = w
            self.call(w, WitnessStart(req_id, self.id, reset=True), retry=self.retry_ticks)
        if not self.witnesses:
            self._send_migrate_data()

    def on_WitnessStartReply(self, src: NodeId, m: WitnessStartReply) -> None:
        mig = self._migration
        if mig is None or m.req_id not in mig["resets"] or not self.settle(m.req_id):
            return
        del mig["resets"][m.req_id]
        if not mig["resets"]:
            self._send_migrate_data()

    def _send_migrate_data(self) -> None:
        mig = self._migration
        moved: KeyRange = mig["req"].moved
        values = tuple(sorted((k, v) for k, v in self.kv.snapshot().items() if k in moved))
        records = tuple(r for r in self.rifl.records() if any(k in moved for k in r.keys))
        req_id = self.next_req_id()
        mig["data_req"] = req_id
        self.event("migrate_data", moved=moved.to_json(), objects=len(values), records=len(records))
        self.call(mig["req"].target, MigrateData(req_id, moved, values, records), retry=self.retry_ticks)

    def on_MigrateDataAck(self, src: NodeId, m: MigrateDataAck) -> None:
        mig = self._migration
        if mig is None or m.req_id != mig["data_req"] or not self.settle(m.req_id):
            return
        self.send(mig["coordinator"], MigrateReady(mig["req"].req_id))

    def on_MigrateCommit(self, src: NodeId, m: MigrateCommit) -> None:
        mig = self._migration
        if mig is not None and mig["req"].req_id == m.req_id:
            moved = mig["req"].moved
            self.ranges = tuple(part for r in self.ranges for part in r.minus(moved))
            self._migration = None
            self._handled[("migrate", m.req_id)] = True
            self.pauses.discard("migrate")
            self.event("migration_committed", moved=moved.to_json())
            self._drain_queue()
        self.send(src, MigrateCommitAck(m.req_id))

    def on_MigrateData(self, src: NodeId, m: MigrateData) -> None:
        key = ("migrate_in", m.req_id)
        if key in self._handled:
            if self._handled[key]:
                self.send(src, MigrateDataAck(m.req_id))
            return
        self._handled[key] = False
        pos = self.log_head + 1
        records = tuple(CompletionRecord(r.rpc_id, r.result, pos, r.keys) for r in m.records
                        if self.rifl.lookup(r.rpc_id) is None)
        entry = LogEntry(pos, control=("install", m.values, records))
        self.log.append(entry)
        self.kv.install(dict(m.values), pos)
        for r in records:
            self.rifl.record_completion(r)
        self.pending.append(_Unsynced(entry))

        def own() -> None:
            self.ranges = self.ranges + (m.moved,)
            self.event("migration_installed", moved=m.moved.to_json(), objects=len(m.values))
            self._done(key, src, MigrateDataAck(m.req_id))

        self.wait_for_sync(pos, own)

    # -- recovery ---------------------------------------------------------------

    def on_Recover(self, src: NodeId, m: Recover) -> None:
        if self._recovery is not None:
            if self._recovery_done and m.req_id == self._recovery.req_id:
                self.send(src, RecoveryDone(m.req_id))
            return
        self._recovery, self._recovery_src = m, src
        self.recovering = True
        self.epoch = m.epoch
        self.backups = m.backups
        self.ranges = m.ranges
        self.event("recovery_started", epoch=m.epoch)
        # Always the first backup: it is also the one clients read from, so
        # values they saw there can never be rolled back by a restore.
        self._restore_req = self.next_req_id()
        self.call(m.backups[0], Restore(self._restore_req, m.epoch), retry=self.retry_ticks)

    def on_RestoreReply(self, src: NodeId, m: RestoreReply) -> None:
        if not self.recovering or not self.settle(m.req_id):
            return
        if not m.ok:
            self.dead = True
            self.event("recovery_superseded", epoch=self.epoch)
            return
        self.log = list(m.entries)
        self.kv, self.rifl, head = replay_log(self.log)
        self.sync_point = head
        self.event("restored", source=str(src), head=head)
        order = list(self._recovery.candidates)
        self.rng.shuffle(order)

        def rotate(dst: NodeId, tries: int) -> NodeId:
            return order[tries % len(order)]

        self._rd_order = order
        self._rd_req = self.next_req_id()
        self.call(order[0], GetRecoveryData(self._rd_req), retry=self.retry_ticks, redirect=rotate)

    def on_RecoveryData(self, src: NodeId, m: RecoveryData) -> None:
        if not self.recovering or m.req_id != self._rd_req or not self.outstanding(m.req_id):
            return
        if not m.ok:
            return  # keep rotating through the candidates
        self.settle(m.req_id)
        self.event("replay_source", witness=str(src), requests=len(m.requests))
        requests = list(m.requests)
        self.rng.shuffle(requests)  # witness contents commute; any order will do
        self.rifl.set_replay_mode(True)
        for sr in requests:
            req = decode_request(sr.request)
            if not self.owns(req.op.keys):
                self.event("replay_skip_not_owner", rpc=str(sr.rpc_id), keys=list(req.op.keys))
                continue
            status, _ = self.rifl.check_duplicate(sr.rpc_id)
            if status is Status.NEW:
                self.event("replay_execute", rpc=str(sr.rpc_id))
                self.execute(req.op, sr.rpc_id)
            else:
                self.event("replay_filtered", rpc=str(sr.rpc_id), status=status.value)
        self.rifl.set_replay_mode(False)
        self.full_sync = True
        self.wait_for_sync(self.log_head, self._finish_recovery)

    def _finish_recovery(self) -> None:
        m = self._recovery
        self.witnesses = m.new_witnesses
        self.witness_version = m.witness_version
        self.recovering = False
        self._recovery_done = True
        self.event("recovery_done", epoch=self.epoch, head=self.log_head, version=self.witness_version)
        self.send(self._recovery_src, RecoveryDone(m.req_id))
        self._drain_queue()

    # -- checks -----------------------------------------------------------------

    def unsynced_units(self) -> list[_Unsynced]:
        return (self.inflight.units if self.inflight else []) + self.pending

    def check_invariants(self) -> None:
        assert self.sync_point <= self.log_head
        units = self.unsynced_units()
        for u in units:
            assert self.sync_point < u.entry.position <= self.log_head
        if not self.recovering:
            assert len(self.pending) <= self.batch_limit, f"{len(self.pending)} ops wait for a sync"
        seen: dict[int, int] = {}
        for u in units:
            if u.speculative:
                for h in u.entry.op.key_hashes:
                    assert h not in seen, f"speculative ops at {seen[h]} and {u.entry.position} share a key"
                    seen[h] = u.entry.position
