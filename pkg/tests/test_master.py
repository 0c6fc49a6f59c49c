from __future__ import annotations

import pytest

from curpsim import kv
from curpsim.backup import Backup
from curpsim.master import Master
from curpsim.messages import (
    BackupSync,
    ClientReply,
    ClientRequest,
    KeyRange,
    Recover,
    RecoveryDone,
    ReplyError,
    StoredRequest,
    SyncRpc,
    SyncRpcReply,
    encode_request,
)
from curpsim.rifl import RpcId
from curpsim.sim import NodeId, Role, Simulator
from curpsim.witness import Witness

from conftest import Probe

CLIENT = NodeId(Role.CLIENT, 0)
COORD = NodeId(Role.COORDINATOR, 0)


class Rig:
    """One master, three real backups and a probe standing in for client and coordinator."""

    def __init__(self, seed=1, *, batch_limit=50, preemptive_sync=False, recovering=False, f=3,
                 ranges=(KeyRange(),)):
        self.sim = Simulator(seed)
        self.client = self.sim.add(Probe(CLIENT))
        self.coord = self.sim.add(Probe(COORD))
        self.backups = [self.sim.add(Backup(NodeId(Role.BACKUP, i))) for i in range(f)]
        self.master = self.sim.add(Master(NodeId(Role.MASTER, 0), coordinator=COORD,
                                          backups=tuple(b.id for b in self.backups), batch_limit=batch_limit,
                                          preemptive_sync=preemptive_sync, recovering=recovering, ranges=ranges))
        self.seq = 0

    def request(self, op, *, version=0, seq=None, client=CLIENT):
        if seq is None:
            self.seq += 1
            seq = self.seq
        m = ClientRequest(seq, 0, op, RpcId(client.index, seq) if op.is_update else None, version)
        self.sim.send(client, self.master.id, m)
        return m

    def replies(self):
        return [(t, p) for t, _, p in self.client.inbox if isinstance(p, ClientReply)]

    def backup_syncs(self):
        return [r for r in self.sim.trace.of_kind("send") if isinstance(r.summary, BackupSync)]


def test_distinct_keys_reply_speculatively_without_sync():
    rig = Rig()
    rig.request(kv.put("1", "a"))
    rig.request(kv.put("2", "b"))
    rig.sim.run_until(10)
    assert [(t, p.synced, p.error) for t, p in rig.replies()] == [(2, False, None), (2, False, None)]
    assert rig.master.syncs == 0 and rig.backup_syncs() == []
    rig.master.check_invariants()


def test_read_of_unsynced_key_waits_for_sync():
    rig = Rig()
    rig.request(kv.put("2", "x"))
    rig.sim.run_until(1)
    rig.request(kv.get("x"))
    rig.sim.run_until(20)
    (t1, w), (t2, r) = rig.replies()
    assert not w.synced and t1 == 2
    assert r.synced and r.result.values == ("2",)
    assert t2 == 5  # request at 2, sync out at 2, acks at 4, reply lands at 5
    assert rig.master.syncs == 1
    assert all(b.state.kv.value("x") == "2" for b in rig.backups)


def test_second_write_to_same_key_is_not_speculative():
    rig = Rig()
    rig.request(kv.put("1", "x"))
    rig.request(kv.put("2", "x"))
    rig.sim.run_until(20)
    (_, first), (_, second) = rig.replies()
    assert not first.synced and second.synced
    rig.master.check_invariants()


def test_batch_limit_starts_exactly_one_sync():
    rig = Rig()
    for i in range(49):
        rig.request(kv.put("v", f"k{i}"))
    rig.sim.run_until(1)
    assert rig.master.syncs == 0 and rig.master.inflight is None
    rig.request(kv.put("v", "k49"))
    rig.sim.run_until(2)
    assert rig.master.inflight is not None and len(rig.master.inflight.entries) == 50
    rig.request(kv.put("v", "k50"))  # the 51st rides in the next batch
    rig.sim.run_until(30)
    assert rig.master.syncs == 1
    assert len(rig.master.pending) == 1
    assert len(rig.replies()) == 51


def test_pending_never_exceeds_batch_limit():
    rig = Rig(batch_limit=5)
    for i in range(40):
        rig.request(kv.put("v", f"k{i}"))
    for _ in range(40):
        rig.sim.run_until(rig.sim.now + 1)
        rig.master.check_invariants()
    assert len(rig.replies()) == 40


def test_stale_witness_version_is_refused():
    rig = Rig()
    rig.request(kv.put("1", "a"), version=3)
    rig.sim.run_until(5)
    (_, r), = rig.replies()
    assert r.error is ReplyError.WRONG_WITNESS_VERSION and r.result is None
    assert rig.master.log_head == 0


def test_sync_of_ten_ops_sends_one_rpc_per_backup():
    rig = Rig(batch_limit=10)
    for i in range(10):
        rig.request(kv.put("v", f"k{i}"))
    rig.sim.run_until(20)
    sends = rig.backup_syncs()
    assert len(sends) == 3 and rig.master.backup_rpcs == 3
    assert {len(b.state.log) for b in rig.backups} == {10}


def test_nothing_to_sync_sends_nothing():
    rig = Rig()
    rig.master.wait_for_sync(rig.master.log_head, lambda: None)
    rig.sim.run_until(10)
    assert rig.backup_syncs() == []


def test_sync_rpc_waits_for_backups_or_answers_at_once():
    rig = Rig()
    rig.request(kv.put("1", "a"))
    rig.sim.run_until(2)
    rig.sim.send(CLIENT, rig.master.id, SyncRpc(1, 1, RpcId(0, 1)))
    rig.sim.run_until(20)
    (t, r), = [(t, p) for t, _, p in rig.client.inbox if isinstance(p, SyncRpcReply)]
    assert r.ok and t == 6  # sent at 2, sync out at 3, acks at 5
    rig.sim.send(CLIENT, rig.master.id, SyncRpc(1, 2, RpcId(0, 1)))
    rig.sim.run_until(30)
    times = [t for t, _, p in rig.client.inbox if isinstance(p, SyncRpcReply)]
    assert times[-1] == 22
    rig.sim.send(CLIENT, rig.master.id, SyncRpc(9, 1, RpcId(0, 77)))
    rig.sim.run_until(40)
    assert rig.client.of(SyncRpcReply)[-1].ok is False


def test_duplicate_request_returns_saved_result():
    rig = Rig()
    m = rig.request(kv.incr("c"))
    rig.sim.run_until(3)
    rig.sim.send(CLIENT, rig.master.id, m)
    rig.sim.run_until(10)
    a, b = (p for _, p in rig.replies())
    assert a.result == b.result == kv.Result((1,))
    assert rig.master.kv.value("c") == 1


def test_expire_lease_syncs_first():
    rig = Rig()
    rig.request(kv.put("1", "a"))
    rig.sim.run_until(2)
    rig.master.expire_lease(0)
    rig.sim.run_until(20)
    first_sync = rig.sim.trace.index(rig.backup_syncs()[0])
    expired = next(rig.sim.trace.events("lease_expired"))
    assert first_sync < rig.sim.trace.index(expired)
    assert expired.summary["sync_point"] == 1
    rig.sim.send(CLIENT, rig.master.id, ClientRequest(5, 0, kv.put("9", "z"), RpcId(0, 5)))
    rig.sim.run_until(30)
    assert rig.replies()[-1][1].error is ReplyError.STALE_RPC


def test_not_owner_outside_ranges():
    rig = Rig(ranges=(KeyRange("", "m"),))
    rig.request(kv.put("1", "zebra"))
    rig.request(kv.put("1", "apple"))
    rig.sim.run_until(5)
    errors = [p.error for _, p in rig.replies()]
    assert errors == [ReplyError.NOT_OWNER, None]


def _recovery_rig(seed, *, synced_ops, unsynced_ops):
    """Backups hold ``synced_ops``; a witness holds both lists."""
    rig = Rig(seed, recovering=True)
    from curpsim.messages import LogEntry
    state = kv.KvState()
    log = []
    for i, op in enumerate(synced_ops, start=1):
        log.append(LogEntry(i, op, RpcId(7, i), state.apply(op, i)))
    for b in rig.backups:
        b.state.handle_sync(1, 0, log)
    w = rig.sim.add(Witness(NodeId(Role.WITNESS, 0)))
    w.store.start(NodeId(Role.MASTER, 99))
    for i, op in enumerate(list(synced_ops) + list(unsynced_ops), start=1):
        req = ClientRequest(i, 0, op, RpcId(7, i), 0)
        w.store.record(NodeId(Role.MASTER, 99), op.key_hashes, req.rpc_id, encode_request(req))
    rig.sim.send(COORD, rig.master.id, Recover(1, 2, tuple(b.id for b in rig.backups), (w.id,), (), 1,
                                                (KeyRange(),)))
    rig.sim.run_until(100)
    assert rig.coord.of(RecoveryDone)
    return rig


def test_recovery_filters_synced_and_executes_the_rest():
    rig = _recovery_rig(1, synced_ops=[kv.incr("a")], unsynced_ops=[kv.incr("b")])
    assert rig.master.kv.snapshot() == {"a": 1, "b": 1}
    events = [r.summary for r in rig.sim.trace.of_kind("event")]
    assert {"event": "replay_filtered", "rpc": "7.1", "status": "completed"} in events
    assert any(e["event"] == "replay_execute" and e["rpc"] == "7.2" for e in events)
    assert all(b.state.kv.snapshot() == {"a": 1, "b": 1} for b in rig.backups)
    # The client's retry of the replayed request gets the original result.
    rig.sim.send(CLIENT, rig.master.id, ClientRequest(2, 1, kv.incr("b"), RpcId(7, 2), 1))
    rig.sim.run_until(120)
    (_, r), = rig.replies()
    assert r.result == kv.Result((1,)) and r.synced
    assert rig.master.kv.value("b") == 1


@pytest.mark.parametrize("seed", range(6))
def test_replay_order_does_not_change_the_state(seed):
    ops = [kv.put(f"v{i}", f"k{i}") for i in range(6)] + [kv.incr("c1"), kv.incr("c2", 4)]
    rig = _recovery_rig(seed, synced_ops=[], unsynced_ops=ops)
    expected = {f"k{i}": f"v{i}" for i in range(6)} | {"c1": 1, "c2": 4}
    assert rig.master.kv.snapshot() == expected


def test_requests_wait_while_recovering():
    rig = Rig(recovering=True)
    rig.request(kv.put("1", "a"))
    rig.sim.run_until(10)
    assert rig.replies() == [] and len(rig.master.queue) == 1
