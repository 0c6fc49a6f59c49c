"""Configuration manager.

The coordinator is reliable and never crashes.  It owns the published
configuration of every partition and drives the three reconfigurations:
master recovery, witness replacement and range migration.  Crashes are
reported to it by the scenario (``on_master_crash`` / ``on_witness_crash``)
rather than discovered by a failure detector, which keeps runs
deterministic.  Reconfigurations of one partition run one at a time.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from curpsim.messages import (
    BumpEpoch,
    BumpEpochReply,
    ConfigFetch,
    ConfigReply,
    ExpireLease,
    ExpireLeaseDone,
    KeyRange,
    Migrate,
    MigrateCommit,
    MigrateCommitAck,
    MigrateReady,
    PartitionConfig,
    Recover,
    RecoveryDone,
    WitnessChange,
    WitnessChangeDone,
    WitnessEnd,
    WitnessEndReply,
    WitnessStart,
    WitnessStartReply,
)
from curpsim.sim import Node, NodeId


@dataclass
class _Partition:
    config: PartitionConfig
    # Witnesses a recovering master may replay from.  Changes only once a
    # reconfiguration has fully finished.
    recoverable: tuple[NodeId, ...]
    busy: Optional[dict] = None
    backlog: collections.deque = field(default_factory=collections.deque)


class Coordinator(Node):
    def __init__(self, node_id: NodeId, *, spawn_master: Callable[[int], NodeId],
                 spawn_witness: Callable[[int], NodeId], retry_ticks: int = 20):
        super().__init__(node_id)
        self.spawn_master = spawn_master
        self.spawn_witness = spawn_witness
        self.retry_ticks = retry_ticks
        self.parts: list[_Partition] = []
        self.next_epoch = 1
        self.next_version = 1
        self._replies: dict[int, Callable[[], None]] = {}

    def add_partition(self, config: PartitionConfig) -> None:
        self.parts.append(_Partition(config, config.witnesses))
        self.next_epoch = max(self.next_epoch, config.epoch + 1)
        self.next_version = max(self.next_version, config.witness_version + 1)

    def config(self, partition: int = 0) -> PartitionConfig:
        return self.parts[partition].config

    def current_master(self, partition: int = 0) -> NodeId:
        """The master in charge right now, including one still recovering."""
        busy = self.parts[partition].busy
        if busy is not None and busy["kind"] == "recover":
            return busy["master"]
        return self.parts[partition].config.master

    def _publish(self, p: int, config: PartitionConfig) -> None:
        self.parts[p].config = config
        self.event("config_published", partition=p, master=str(config.master), epoch=config.epoch,
                   version=config.witness_version, witnesses=[str(w) for w in config.witnesses],
                   ranges=[r.to_json() for r in config.ranges])

    def on_ConfigFetch(self, src: NodeId, m: ConfigFetch) -> None:
        self.send(src, ConfigReply(m.req_id, tuple(p.config for p in self.parts)))

    # -- request plumbing -------------------------------------------------------

    def _call(self, dst: NodeId, make: Callable[[int], object], then: Optional[Callable[[], None]] = None,
              **kw) -> int:
        req_id = self.next_req_id()
        if then is not None:
            self._replies[req_id] = then
        self.call(dst, make(req_id), retry=self.retry_ticks, **kw)
        return req_id

    def _answered(self, req_id: int) -> None:
        if self.settle(req_id):
            then = self._replies.pop(req_id, None)
            if then is not None:
                then()

    def _cancel(self, req_ids) -> None:
        for r in req_ids:
            self.settle(r)
            self._replies.pop(r, None)

    on_BumpEpochReply = lambda self, src, m: self._answered(m.req_id)  # noqa: E731
    on_WitnessStartReply = lambda self, src, m: self._answered(m.req_id) if m.ok else None  # noqa: E731
    on_WitnessEndReply = lambda self, src, m: self._answered(m.req_id)  # noqa: E731
    on_RecoveryDone = lambda self, src, m: self._answered(m.req_id)  # noqa: E731
    on_WitnessChangeDone = lambda self, src, m: self._answered(m.req_id)  # noqa: E731
    on_MigrateReady = lambda self, src, m: self._answered(m.req_id)  # noqa: E731
    on_MigrateCommitAck = lambda self, src, m: self._answered(m.req_id)  # noqa: E731
    on_ExpireLeaseDone = lambda self, src, m: self._answered(m.req_id)  # noqa: E731

    def _end_witnesses(self, witnesses) -> None:
        for w in witnesses:
            self._call(w, lambda r: WitnessEnd(r))

    def _start_witnesses(self, witnesses, master: NodeId, then: Callable[[], None]) -> list[int]:
        left = set(witnesses)
        req_ids = []

        def started(w: NodeId) -> None:
            left.discard(w)
            if not left:
                then()

        for w in witnesses:
            req_ids.append(self._call(w, lambda r, m=master: WitnessStart(r, m), lambda w=w: started(w)))
        if not witnesses:
            then()
        return req_ids

    # -- serialisation ------------------------------------------------------------

    def _run(self, p: int, job: Callable[[], None]) -> None:
        part = self.parts[p]
        if part.busy is None:
            job()
        else:
            part.backlog.append(job)

    def _finish(self, p: int) -> None:
        part = self.parts[p]
        part.busy = None
        while part.backlog and part.busy is None:
            part.backlog.popleft()()

    # -- master recovery ------------------------------------------------------------

    def on_master_crash(self, p: int = 0, master: Optional[NodeId] = None) -> None:
        """Replace the master of partition ``p`` (scenario-injected signal)."""
        part = self.parts[p]
        busy = part.busy
        if busy is not None and busy["kind"] == "recover":
            if master is not None and master != busy["master"]:
                return  # that master was already replaced
            self._abort(p)
        elif busy is not None:
            if master is not None and master != part.config.master:
                return
            self._abort(p)
        elif master is not None and master != part.config.master:
            return
        self._recover(p)

    def _abort(self, p: int) -> None:
        part = self.parts[p]
        busy = part.busy
        self._cancel(busy["calls"])
        self._end_witnesses(busy.get("fresh", ()))
        self.event("reconfiguration_aborted", partition=p, kind=busy["kind"])
        part.busy = None

    def _recover(self, p: int) -> None:
        part = self.parts[p]
        cfg = part.config
        epoch, self.next_epoch = self.next_epoch, self.next_epoch + 1
        version, self.next_version = self.next_version, self.next_version + 1
        new_master = self.spawn_master(p)
        fresh = tuple(self.spawn_witness(p) for _ in cfg.witnesses)
        busy = part.busy = {"kind": "recover", "master": new_master, "fresh": fresh, "calls": []}
        self.event("recovery_begin", partition=p, old=str(cfg.master), new=str(new_master), epoch=epoch,
                   candidates=[str(w) for w in part.recoverable])
        for b in cfg.backups:
            busy["calls"].append(self._call(b, lambda r: BumpEpoch(r, epoch)))

        def recover() -> None:
            rec = Recover(0, epoch, cfg.backups, part.recoverable, fresh, version, cfg.ranges)
            busy["calls"].append(self._call(new_master, lambda r: replace(rec, req_id=r), done))

        def done() -> None:
            old = part.recoverable
            part.recoverable = fresh
            self._publish(p, replace(part.config, master=new_master, epoch=epoch, witnesses=fresh,
                                     witness_version=version))
            self._end_witnesses(old)
            self._finish(p)

        busy["calls"] += self._start_witnesses(fresh, new_master, recover)

    # -- witness replacement ------------------------------------------------------

    def on_witness_crash(self, p: int, witness: NodeId) -> None:
        self._run(p, lambda: self._replace_witness(p, witness))

    def _replace_witness(self, p: int, witness: NodeId) -> None:
        part = self.parts[p]
        cfg = part.config
        if witness not in cfg.witnesses:
            return
        version, self.next_version = self.next_version, self.next_version + 1
        new = self.spawn_witness(p)
        witnesses = tuple(new if w == witness else w for w in cfg.witnesses)
        busy = part.busy = {"kind": "witness", "fresh": (new,), "calls": []}
        self.event("witness_change_begin", partition=p, old=str(witness), new=str(new), version=version)

        def change() -> None:
            busy["calls"].append(self._call(cfg.master, lambda r: WitnessChange(r, witnesses, version), done))

        def done() -> None:
            part.recoverable = witnesses
            self._publish(p, replace(part.config, witnesses=witnesses, witness_version=version))
            self._end_witnesses((witness,))
            self._finish(p)

        busy["calls"] += self._start_witnesses((new,), cfg.master, change)

    # -- migration ----------------------------------------------------------------------

    def start_migration(self, src: int, moved: KeyRange, dst: int) -> None:
        self._run(src, lambda: self._migrate(src, moved, dst))

    def _migrate(self, p: int, moved: KeyRange, q: int) -> None:
        part = self.parts[p]
        busy = part.busy = {"kind": "migrate", "calls": []}
        self.event("migration_begin", source=p, target=q, moved=moved.to_json())
        target = self.parts[q].config.master
        mig_id = 0

        def ready() -> None:
            src_cfg, dst_cfg = self.parts[p].config, self.parts[q].config
            self._publish(p, replace(src_cfg, ranges=tuple(x for r in src_cfg.ranges for x in r.minus(moved))))
            self._publish(q, replace(dst_cfg, ranges=dst_cfg.ranges + (moved,)))
            # The commit reuses the migration's id; the source matches on it.
            self._replies[mig_id] = committed
            self.call(src_cfg.master, MigrateCommit(mig_id), retry=self.retry_ticks)

        def committed() -> None:
            self.event("migration_done", source=p, target=q, moved=moved.to_json())
            self._finish(p)

        mig_id = self._call(part.config.master, lambda r: Migrate(r, moved, target), ready)
        busy["calls"].append(mig_id)

    # -- leases -----------------------------------------------------------------------------

    def expire_client(self, client_id: int) -> None:
        """Expire a client's lease on every partition's master."""
        for p, part in enumerate(self.parts):
            self._run(p, lambda p=p: self._expire(p, client_id))

    def _expire(self, p: int, client_id: int) -> None:
        part = self.parts[p]
        part.busy = {"kind": "expire", "calls": []}

        def done() -> None:
            self.event("lease_expire_done", partition=p, client=client_id)
            self._finish(p)

        part.busy["calls"].append(self._call(part.config.master, lambda r: ExpireLease(r, client_id), done))
