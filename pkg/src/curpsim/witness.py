"""Witness servers.

A witness keeps client update requests in a set-associative table indexed
by 64-bit key hash.  It accepts a request only if no stored request touches
any of the same keys, so everything it holds commutes and can be replayed
in any order.  The table lives in (simulated) non-volatile memory: crashing
the node leaves it intact.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from curpsim.messages import (
    CommuteCheck,
    CommuteCheckReply,
    Gc,
    GcReply,
    GetRecoveryData,
    Record,
    RecordReply,
    RecoveryData,
    StoredRequest,
    WitnessEnd,
    WitnessEndReply,
    WitnessStart,
    WitnessStartReply,
)
from curpsim.rifl import RpcId
from curpsim.sim import Node, NodeId

NUM_SETS = 1024
WAYS = 4
SLOT_BYTES = 2048
STALE_AFTER_GCS = 3


class Mode(enum.Enum):
    IDLE = "idle"
    NORMAL = "normal"
    RECOVERY = "recovery"


class RecordStatus(enum.Enum):
    ACCEPTED = "accepted"
    CONFLICT = "conflict"  # another request touches one of the keys
    NO_SLOT = "no_slot"  # a target set has no free way
    TOO_LARGE = "too_large"
    WRONG_MASTER = "wrong_master"
    NOT_NORMAL = "not_normal"  # idle, or frozen for recovery

    @property
    def accepted(self) -> bool:
        return self is RecordStatus.ACCEPTED


class WitnessModeError(RuntimeError):
    pass


@dataclass
class _Held:
    request: StoredRequest
    gc_epoch_at_write: int


class WitnessStore:
    """Request table for one master.

    ``sets`` maps a set index to the ``(key_hash, rpc_id)`` pairs occupying
    its ways; empty sets are absent.
    """

    def __init__(self, num_sets: int = NUM_SETS, ways: int = WAYS, slot_bytes: Optional[int] = SLOT_BYTES):
        if num_sets < 1 or ways < 1:
            raise ValueError("geometry must be positive")
        self.num_sets = num_sets
        self.ways = ways
        self.slot_bytes = slot_bytes
        self.mode = Mode.IDLE
        self.master_id: Optional[NodeId] = None
        self.gc_epoch = 0
        self.sets: dict[int, list[tuple[int, RpcId]]] = {}
        self.held: dict[RpcId, _Held] = {}
        self._frozen: Optional[tuple[StoredRequest, ...]] = None

    @property
    def capacity(self) -> int:
        return self.num_sets * self.ways

    def occupied(self) -> int:
        return sum(len(s) for s in self.sets.values())

    def requests(self) -> list[StoredRequest]:
        return [h.request for h in self.held.values()]

    # -- lifecycle --------------------------------------------------------

    def start(self, master_id: NodeId) -> bool:
        if self.mode is not Mode.IDLE:
            return False
        self.mode = Mode.NORMAL
        self.master_id = master_id
        return True

    def end(self) -> None:
        self.mode = Mode.IDLE
        self.master_id = None
        self.gc_epoch = 0
        self.sets.clear()
        self.held.clear()
        self._frozen = None

    # -- client path ------------------------------------------------------

    def record(self, master_id: NodeId, key_hashes: Sequence[int], rpc_id: RpcId, request: bytes) -> RecordStatus:
        if self.mode is not Mode.NORMAL:
            return RecordStatus.NOT_NORMAL
        if master_id != self.master_id:
            return RecordStatus.WRONG_MASTER
        if rpc_id in self.held:
            return RecordStatus.ACCEPTED  # client retry of a request already held
        if self.slot_bytes is not None and len(request) > self.slot_bytes:
            return RecordStatus.TOO_LARGE
        hashes = tuple(dict.fromkeys(key_hashes))
        need: dict[int, int] = {}
        for h in hashes:
            idx = h % self.num_sets
            for held_hash, _ in self.sets.get(idx, ()):
                if held_hash == h:
                    return RecordStatus.CONFLICT
            need[idx] = need.get(idx, 0) + 1
        for idx, n in need.items():
            if len(self.sets.get(idx, ())) + n > self.ways:
                return RecordStatus.NO_SLOT
        for h in hashes:
            self.sets.setdefault(h % self.num_sets, []).append((h, rpc_id))
        self.held[rpc_id] = _Held(StoredRequest(rpc_id, hashes, request), self.gc_epoch)
        return RecordStatus.ACCEPTED

    def record_hash(self, h: int, rpc_id) -> bool:
        """Single-key fast path for the associativity experiment.

        Fills a slot only: no request is kept, so ``held`` is not updated.
        """
        idx = h % self.num_sets
        ways = self.sets.get(idx)
        if ways is None:
            self.sets[idx] = [(h, rpc_id)]
            return True
        if len(ways) >= self.ways:
            return False
        for held_hash, _ in ways:
            if held_hash == h:
                return False
        ways.append((h, rpc_id))
        return True

    def check_commutative(self, key_hashes: Iterable[int]) -> bool:
        if self.mode is not Mode.NORMAL:
            return False
        for h in key_hashes:
            for held_hash, _ in self.sets.get(h % self.num_sets, ()):
                if held_hash == h:
                    return False
        return True

    # -- master path ------------------------------------------------------

    def gc(self, entries: Iterable[tuple[int, RpcId]]) -> list[StoredRequest]:
        """Free matching slots and report requests that look like garbage."""
        if self.mode is not Mode.NORMAL:
            raise WitnessModeError(f"gc in {self.mode.value} mode")
        for h, rpc_id in entries:
            idx = h % self.num_sets
            ways = self.sets.get(idx)
            if not ways:
                continue
            for i, (held_hash, held_rpc) in enumerate(ways):
                if held_hash == h and held_rpc == rpc_id:
                    del ways[i]
                    if not ways:
                        del self.sets[idx]
                    self._forget_slot(rpc_id, h)
                    break
        self.gc_epoch += 1
        return [held.request for held in self.held.values()
                if self.gc_epoch - held.gc_epoch_at_write >= STALE_AFTER_GCS]

    def _forget_slot(self, rpc_id: RpcId, h: int) -> None:
        held = self.held.get(rpc_id)
        if held is None:
            return
        rest = tuple(x for x in held.request.key_hashes if x != h)
        if rest:
            held.request = StoredRequest(rpc_id, rest, held.request.request)
        else:
            del self.held[rpc_id]

    def get_recovery_data(self) -> list[StoredRequest]:
        """Freeze the table for good and hand back every request once."""
        if self.mode is Mode.IDLE:
            raise WitnessModeError("witness is not serving any master")
        if self._frozen is None:
            self.mode = Mode.RECOVERY
            self._frozen = tuple(h.request for h in self.held.values())
        return list(self._frozen)

    # -- checks -----------------------------------------------------------

    def check_invariants(self) -> None:
        assert self.occupied() <= self.capacity
        seen: dict[int, RpcId] = {}
        per_rpc: dict[RpcId, int] = {}
        for idx, ways in self.sets.items():
            assert 0 < len(ways) <= self.ways, f"set {idx} holds {len(ways)} ways"
            for h, rpc_id in ways:
                assert h % self.num_sets == idx
                if self.mode is Mode.NORMAL:
                    assert seen.setdefault(h, rpc_id) == rpc_id, f"non-commutative requests share hash {h:#x}"
                per_rpc[rpc_id] = per_rpc.get(rpc_id, 0) + 1
        assert set(per_rpc) == set(self.held)
        for rpc_id, held in self.held.items():
            assert per_rpc[rpc_id] == len(held.request.key_hashes)


class Witness(Node):
    """Network front end of a :class:`WitnessStore`."""

    def __init__(self, node_id: NodeId, store: Optional[WitnessStore] = None):
        super().__init__(node_id)
        self.store = store or WitnessStore()
        self.accepted = 0
        self.rejected = 0
        self._applied_starts: set[tuple[NodeId, int]] = set()

    def on_Record(self, src: NodeId, m: Record) -> None:
        status = self.store.record(m.master_id, m.key_hashes, m.rpc_id, m.request)
        if status.accepted:
            self.accepted += 1
        else:
            self.rejected += 1
        self.send(src, RecordReply(m.op_id, m.attempt, status.accepted, status.value))

    def on_CommuteCheck(self, src: NodeId, m: CommuteCheck) -> None:
        ok = self.store.master_id == m.master_id and self.store.check_commutative(m.key_hashes)
        self.send(src, CommuteCheckReply(m.op_id, m.attempt, ok))

    def on_Gc(self, src: NodeId, m: Gc) -> None:
        if self.store.mode is not Mode.NORMAL or self.store.master_id != src:
            self.send(src, GcReply(False))
            return
        stale = self.store.gc(m.entries)
        self.send(src, GcReply(True, tuple(stale)))

    def on_GetRecoveryData(self, src: NodeId, m: GetRecoveryData) -> None:
        if self.store.mode is Mode.IDLE:
            self.send(src, RecoveryData(m.req_id, False))
            return
        self.send(src, RecoveryData(m.req_id, True, tuple(self.store.get_recovery_data())))

    def on_WitnessStart(self, src: NodeId, m: WitnessStart) -> None:
        # Retransmitted starts must not wipe requests recorded since.
        if (src, m.req_id) in self._applied_starts:
            self.send(src, WitnessStartReply(m.req_id, True))
            return
        if m.reset and self.store.master_id == m.master_id:
            self.store.end()
        ok = self.store.start(m.master_id)
        if ok:
            self._applied_starts.add((src, m.req_id))
        self.send(src, WitnessStartReply(m.req_id, ok))

    def on_WitnessEnd(self, src: NodeId, m: WitnessEnd) -> None:
        self.store.end()
        self.send(src, WitnessEndReply(m.req_id))
