from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from curpsim.kv import Result
from curpsim.rifl import CompletionRecord, RiflTable, RpcId, Status


def rec(client, seq, value="r"):
    return CompletionRecord(RpcId(client, seq), Result((value,)), seq)


def test_unseen_is_new():
    assert RiflTable().check_duplicate(RpcId(1, 1)) == (Status.NEW, None)


def test_recorded_returns_saved_result():
    t = RiflTable()
    t.record_completion(rec(1, 1, "saved"))
    status, found = t.check_duplicate(RpcId(1, 1))
    assert status is Status.COMPLETED and found.result == Result(("saved",))


def test_double_record_is_a_contract_violation():
    t = RiflTable()
    t.record_completion(rec(1, 1))
    with pytest.raises(AssertionError):
        t.record_completion(rec(1, 1))


def test_ack_makes_older_requests_stale():
    t = RiflTable()
    for s in range(1, 7):
        t.record_completion(rec(1, s))
    t.process_ack(1, 5)
    assert all(t.check_duplicate(RpcId(1, s))[0] is Status.STALE for s in range(1, 6))
    assert t.check_duplicate(RpcId(1, 6))[0] is Status.COMPLETED
    assert t.check_duplicate(RpcId(1, 7))[0] is Status.NEW


def test_lower_ack_is_noop():
    t = RiflTable()
    t.process_ack(1, 5)
    t.record_completion(rec(1, 6))
    t.process_ack(1, 3)
    assert t.clients[1].acked_up_to == 5
    assert t.check_duplicate(RpcId(1, 6))[0] is Status.COMPLETED


def test_acks_ignored_in_replay_mode():
    t = RiflTable()
    t.set_replay_mode(True)
    t.set_replay_mode(True)  # idempotent
    t.record_completion(rec(1, 1))
    t.process_ack(1, 1)
    assert t.check_duplicate(RpcId(1, 1))[0] is Status.COMPLETED
    t.set_replay_mode(False)
    t.process_ack(1, 1)
    assert t.check_duplicate(RpcId(1, 1))[0] is Status.STALE


def test_expire_removes_records_and_stales_client():
    t = RiflTable()
    t.record_completion(rec(4, 1))
    t.expire(4)
    assert t.records() == []
    assert t.check_duplicate(RpcId(4, 1))[0] is Status.STALE
    assert t.check_duplicate(RpcId(4, 9))[0] is Status.STALE


def test_expire_unknown_client_is_noop():
    t = RiflTable()
    t.expire(42)
    assert t.clients == {} and t.check_duplicate(RpcId(42, 1))[0] is Status.NEW


@given(st.permutations(list(range(1, 9))), st.lists(st.integers(0, 8), max_size=8))
def test_replay_order_never_loses_records(order, acks):
    """Whatever order replayed requests arrive in, their acks never hide a later one."""
    t = RiflTable()
    t.set_replay_mode(True)
    for seq, ack in zip(order, acks + [0] * 8):
        assert t.check_duplicate(RpcId(1, seq))[0] is Status.NEW
        t.process_ack(1, ack)
        t.record_completion(rec(1, seq))
    assert {r.rpc_id.seq for r in t.records()} == set(range(1, 9))
