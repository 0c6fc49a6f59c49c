"""Wiring: builds a simulated cluster and applies a fault plan to it."""

from __future__ import annotations

from typing import Iterator, Optional, Sequence

from curpsim.backup import Backup
from curpsim.client import Client
from curpsim.coordinator import Coordinator
from curpsim.kv import KvOp
from curpsim.master import BATCH_LIMIT, Master
from curpsim.messages import KeyRange, PartitionConfig
from curpsim.sim import FaultPlan, NodeId, Role, Simulator
from curpsim.witness import Witness

DETECT_DELAY = 10


class Cluster:
    """A coordinator plus, per partition, one master, ``f`` backups and ``f`` witnesses.

    Crashes in the fault plan are applied by name.  ``"master"`` means the
    master currently in charge of partition 0.  The coordinator hears about
    master and witness crashes ``detect_delay`` ticks later.
    """

    def __init__(self, seed: int = 0, faults: Optional[FaultPlan] = None, *, f: int = 3,
                 partitions: Sequence[Sequence[KeyRange]] = ((KeyRange(),),),
                 batch_limit: int = BATCH_LIMIT, preemptive_sync: bool = True,
                 detect_delay: int = DETECT_DELAY, replace_witnesses: bool = True,
                 client_timeout: int = 50, trace_messages: bool = True):
        if not 1 <= f <= 3:
            raise ValueError("f must be between 1 and 3")
        self.f = f
        self.sim = Simulator(seed, faults, trace_messages=trace_messages)
        self.batch_limit = batch_limit
        self.preemptive_sync = preemptive_sync
        self.detect_delay = detect_delay
        self.replace_witnesses = replace_witnesses
        self.client_timeout = client_timeout
        self._counts = {role: 0 for role in Role}
        self.owner: dict[NodeId, int] = {}  # master/witness/backup -> partition
        self.coordinator = Coordinator(self._new_id(Role.COORDINATOR), spawn_master=self._spawn_master,
                                       spawn_witness=self._spawn_witness)
        self.sim.add(self.coordinator)
        self.clients: list[Client] = []

        for p, ranges in enumerate(partitions):
            backups = tuple(self._add(Backup(self._new_id(Role.BACKUP)), p).id for _ in range(f))
            witnesses = tuple(self._spawn_witness(p) for _ in range(f))
            master = self._master(p, backups, witnesses, ranges=tuple(ranges))
            for w in witnesses:
                self.sim.nodes[w].store.start(master.id)
            self.coordinator.add_partition(
                PartitionConfig(p, tuple(ranges), master.id, master.epoch, backups, witnesses, 0))

        for c in self.sim.faults.crashes:
            self.sim.at(c.at, lambda c=c: self.crash(c.target))
            if c.restart is not None:
                self.sim.at(c.restart, lambda c=c: self.restart(c.target))

    # -- node factories -----------------------------------------------------------

    def _new_id(self, role: Role) -> NodeId:
        node_id = NodeId(role, self._counts[role])
        self._counts[role] += 1
        return node_id

    def _add(self, node, p: Optional[int] = None):
        self.sim.add(node)
        if p is not None:
            self.owner[node.id] = p
        return node

    def _master(self, p: int, backups, witnesses, *, ranges=(KeyRange(),), recovering: bool = False) -> Master:
        return self._add(Master(self._new_id(Role.MASTER), coordinator=self.coordinator.id, backups=backups,
                                witnesses=witnesses, ranges=ranges, batch_limit=self.batch_limit,
                                preemptive_sync=self.preemptive_sync, recovering=recovering), p)

    def _spawn_master(self, p: int) -> NodeId:
        cfg = self.coordinator.config(p) if p < len(self.coordinator.parts) else None
        backups = cfg.backups if cfg else ()
        return self._master(p, backups, (), recovering=True).id

    def _spawn_witness(self, p: int) -> NodeId:
        return self._add(Witness(self._new_id(Role.WITNESS)), p).id

    def add_client(self, workload: Iterator[tuple[str, KvOp]], *, start: int = 0,
                   max_ops: Optional[int] = None, stop_at: Optional[int] = None) -> Client:
        client = self._add(Client(self._new_id(Role.CLIENT), self.coordinator.id, workload,
                                  timeout=self.client_timeout, max_ops=max_ops, stop_at=stop_at))
        self.clients.append(client)
        client.start(start)
        return client

    # -- lookups ----------------------------------------------------------------------

    def node(self, name) -> object:
        return self.sim.nodes[name if isinstance(name, NodeId) else NodeId.parse(name)]

    def master(self, p: int = 0) -> Master:
        """The master in charge of partition ``p``, recovering or not."""
        return self.sim.nodes[self.coordinator.current_master(p)]

    def witnesses(self, p: int = 0) -> list[Witness]:
        return [self.sim.nodes[w] for w in self.coordinator.config(p).witnesses]

    def backups(self, p: int = 0) -> list[Backup]:
        return [self.sim.nodes[b] for b in self.coordinator.config(p).backups]

    def all_of(self, role: Role) -> list:
        return [n for n in self.sim.nodes.values() if n.id.role is role]

    # -- faults --------------------------------------------------------------------------

    def _resolve(self, target: str) -> NodeId:
        return self.coordinator.current_master(0) if target == "master" else NodeId.parse(target)

    def crash(self, target) -> None:
        node_id = target if isinstance(target, NodeId) else self._resolve(target)
        if node_id not in self.sim.nodes or not self.sim.nodes[node_id].alive:
            return
        self.sim.crash(node_id)
        p = self.owner.get(node_id)
        if node_id.role is Role.MASTER:
            self.sim.at(self.sim.now + self.detect_delay,
                        lambda: self.coordinator.on_master_crash(p, node_id))
        elif node_id.role is Role.WITNESS and self.replace_witnesses:
            self.sim.at(self.sim.now + self.detect_delay,
                        lambda: self.coordinator.on_witness_crash(p, node_id))

    def restart(self, target) -> None:
        node_id = target if isinstance(target, NodeId) else self._resolve(target)
        if node_id in self.sim.nodes:
            self.sim.restart(node_id)

    # -- running -------------------------------------------------------------------------

    def run(self, until: int) -> None:
        self.sim.run_until(until)

    @property
    def trace(self):
        return self.sim.trace

