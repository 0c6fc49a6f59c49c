from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from curpsim.rifl import RpcId
from curpsim.sim import NodeId, Role
from curpsim.witness import Mode, RecordStatus, WitnessModeError, WitnessStore

M = NodeId(Role.MASTER, 0)
OTHER = NodeId(Role.MASTER, 1)


def store(**kw):
    s = WitnessStore(**kw)
    s.start(M)
    return s


def test_record_into_empty_store_is_accepted():
    s = store()
    assert s.record(M, [0x1234], RpcId(1, 1), b"x") is RecordStatus.ACCEPTED
    s.check_invariants()


def test_same_key_is_rejected():
    s = store()
    s.record(M, [7], RpcId(1, 1), b"x")
    assert s.record(M, [7], RpcId(2, 1), b"y") is RecordStatus.CONFLICT


def test_fifth_key_in_a_full_set_is_rejected():
    s = store()
    for i in range(4):
        assert s.record(M, [5 + 1024 * i], RpcId(1, i + 1), b"x").accepted
    assert s.record(M, [5 + 1024 * 4], RpcId(1, 9), b"x") is RecordStatus.NO_SLOT
    assert s.record(M, [6], RpcId(1, 10), b"x").accepted


def test_multi_key_request_needs_room_for_every_key():
    s = store()
    for i in range(3):
        s.record(M, [1024 * i], RpcId(1, i + 1), b"x")
    assert s.record(M, [1024 * 3, 1024 * 4], RpcId(2, 1), b"x") is RecordStatus.NO_SLOT
    assert s.occupied() == 3
    assert s.record(M, [1024 * 3, 1024 * 3, 1], RpcId(2, 2), b"x").accepted  # duplicates collapse
    assert s.occupied() == 5
    s.check_invariants()


def test_retry_of_held_request_is_accepted_again():
    s = store()
    assert s.record(M, [9], RpcId(1, 1), b"x").accepted
    assert s.record(M, [9], RpcId(1, 1), b"x").accepted
    assert s.occupied() == 1


def test_oversized_request_rejected():
    s = store()
    assert s.record(M, [1], RpcId(1, 1), b"x" * 2049) is RecordStatus.TOO_LARGE
    assert s.record(M, [1], RpcId(1, 2), b"x" * 2048).accepted


def test_wrong_master_and_idle_rejected():
    s = WitnessStore()
    assert s.record(M, [1], RpcId(1, 1), b"") is RecordStatus.NOT_NORMAL
    s.start(M)
    assert not s.start(OTHER)
    assert s.record(OTHER, [1], RpcId(1, 1), b"") is RecordStatus.WRONG_MASTER


def test_gc_frees_only_exact_matches():
    s = store()
    s.record(M, [1, 2], RpcId(1, 1), b"")
    s.record(M, [3], RpcId(1, 2), b"")
    s.gc([(1, RpcId(1, 1)), (3, RpcId(9, 9)), (77, RpcId(1, 1))])
    assert s.occupied() == 2
    assert {r.rpc_id for r in s.requests()} == {RpcId(1, 1), RpcId(1, 2)}
    s.gc([(2, RpcId(1, 1))])
    assert [r.rpc_id for r in s.requests()] == [RpcId(1, 2)]
    s.check_invariants()


def test_unmatched_record_reported_stale_after_three_gcs():
    s = store()
    s.record(M, [1], RpcId(1, 1), b"")
    assert s.gc([]) == []
    assert s.gc([]) == []
    assert [r.rpc_id for r in s.gc([])] == [RpcId(1, 1)]


def test_freeze_is_irreversible():
    s = store()
    s.record(M, [1], RpcId(1, 1), b"a")
    first = s.get_recovery_data()
    assert s.mode is Mode.RECOVERY
    assert s.record(M, [2], RpcId(1, 2), b"b") is RecordStatus.NOT_NORMAL
    assert not s.check_commutative([3])
    with pytest.raises(WitnessModeError):
        s.gc([(1, RpcId(1, 1))])
    assert s.get_recovery_data() == first


def test_recovery_data_from_idle_is_an_error():
    with pytest.raises(WitnessModeError):
        WitnessStore().get_recovery_data()


def test_end_resets_for_a_new_master():
    s = store()
    s.record(M, [1], RpcId(1, 1), b"")
    s.get_recovery_data()
    s.end()
    assert s.start(OTHER) and s.occupied() == 0 and s.requests() == []


def test_check_commutative():
    s = store()
    s.record(M, [11], RpcId(1, 1), b"")
    assert not s.check_commutative([11])
    assert s.check_commutative([11 + 1024])


KEYS = st.integers(0, 40).map(lambda i: (i * 256) % (1 << 64))  # crowd a few sets


class WitnessMachine(RuleBasedStateMachine):
    """The store against a list-of-requests model."""

    def __init__(self):
        super().__init__()
        self.s = WitnessStore(num_sets=16, ways=2)
        self.s.start(M)
        self.model: dict[RpcId, set[int]] = {}
        self.seq = 0
        self.frozen = None

    @precondition(lambda self: self.frozen is None)
    @rule(keys=st.lists(KEYS, min_size=1, max_size=3))
    def record(self, keys):
        self.seq += 1
        rpc = RpcId(1, self.seq)
        held = {h for hs in self.model.values() for h in hs}
        status = self.s.record(M, keys, rpc, b"")
        if held & set(keys):
            assert status is RecordStatus.CONFLICT
        if status.accepted:
            self.model[rpc] = set(keys)

    @precondition(lambda self: self.frozen is None)
    @rule(data=st.data())
    def gc(self, data):
        pairs = [(h, r) for r, hs in self.model.items() for h in hs]
        chosen = data.draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
        self.s.gc(chosen)
        for h, r in chosen:
            self.model[r].discard(h)
            if not self.model[r]:
                del self.model[r]

    @rule()
    def freeze(self):
        data = self.s.get_recovery_data()
        if self.frozen is None:
            self.frozen = data
        assert data == self.frozen
        assert self.s.mode is Mode.RECOVERY

    @invariant()
    def matches_model(self):
        self.s.check_invariants()
        if self.frozen is None:
            assert {r.rpc_id: set(r.key_hashes) for r in self.s.requests()} == self.model
            all_keys = [h for hs in self.model.values() for h in hs]
            assert len(all_keys) == len(set(all_keys)), "held requests must be pairwise disjoint"


TestWitnessMachine = WitnessMachine.TestCase
TestWitnessMachine.settings = settings(max_examples=150, stateful_step_count=40, deadline=None)


@given(st.lists(st.integers(0, 2**64 - 1), min_size=1, max_size=200))
def test_occupancy_never_exceeds_capacity(hashes):
    s = store(num_sets=8, ways=4)
    for i, h in enumerate(hashes):
        s.record(M, [h], RpcId(1, i + 1), b"")
    assert s.occupied() <= 32
    s.check_invariants()
