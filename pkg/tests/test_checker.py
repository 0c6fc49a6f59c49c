from __future__ import annotations

import math

from hypothesis import given, settings
from hypothesis import strategies as st

from curpsim import kv
from curpsim.checker import (
    Operation,
    Verdict,
    check_linearizable,
    classify_rtt,
    components,
    history_from_trace,
    operations,
    step,
    with_final_reads,
    backup_read_violations,
)
from curpsim.kv import Result
from curpsim.sim import Trace, TraceRecord

_ids = iter(range(10**9))


def op(o, start, end, *values, client=0):
    """An operation invoked at ``start`` and completed at ``end`` (None: never)."""
    done = end is not None
    return Operation(client, next(_ids), o, start, end if done else math.inf, start,
                     end if done else None, Result(values) if done else None)


def test_sequential_history_is_ok():
    h = [op(kv.put("1", "x"), 0, 1, None), op(kv.get("x"), 2, 3, "1"), op(kv.incr("c"), 4, 5, 1)]
    r = check_linearizable(h)
    assert r.verdict is Verdict.OK and len(r.order) == 3


def test_stale_read_after_completed_write_is_a_violation():
    h = [op(kv.put("1", "x"), 0, 4, None), op(kv.get("x"), 6, 8, None)]
    r = check_linearizable(h)
    assert r.verdict is Verdict.VIOLATION
    assert {o.op.kind.value for o in r.violation} == {"set", "get"}


def test_concurrent_writes_allow_either_value():
    for seen in ("a", "b"):
        h = [op(kv.put("a", "x"), 0, 5, None, client=0), op(kv.put("b", "x"), 1, 4, "a" if seen == "b" else None,
                                                            client=1)]
        # the second writer's result tells us the order it observed
        h[1].result = Result(("a",)) if seen == "b" else Result((None,))
        if seen == "a":
            h[0].result = Result(("b",))
        h.append(op(kv.get("x"), 6, 7, seen))
        assert check_linearizable(h).ok, seen


def test_read_of_never_written_value_is_a_violation():
    h = [op(kv.put("a", "x"), 0, 1, None), op(kv.get("x"), 2, 3, "zzz")]
    assert check_linearizable(h).verdict is Verdict.VIOLATION


def test_incomplete_update_may_or_may_not_take_effect():
    took = [op(kv.put("a", "x"), 0, None), op(kv.get("x"), 5, 6, "a")]
    skipped = [op(kv.put("a", "x"), 0, None), op(kv.get("x"), 5, 6, None)]
    assert check_linearizable(took).ok and check_linearizable(skipped).ok


def test_incomplete_update_cannot_act_before_its_invocation():
    h = [op(kv.get("x"), 0, 1, "a"), op(kv.put("a", "x"), 2, None)]
    assert check_linearizable(h).verdict is Verdict.VIOLATION


def test_incomplete_reads_are_ignored():
    h = [op(kv.put("a", "x"), 0, 1, None), op(kv.get("x"), 2, None)]
    assert check_linearizable(h).ok


def test_multi_key_ops_join_components():
    a = op(kv.put("1", "x", "y"), 0, 1, None, None)
    b = op(kv.get("y"), 2, 3, "1")
    c = op(kv.get("z"), 0, 1, None)
    comps = components([a, b, c])
    assert sorted(len(g) for g in comps) == [1, 2]
    assert check_linearizable([a, b, c]).ok
    bad = op(kv.get("x"), 4, 5, None)
    assert check_linearizable([a, b, bad]).verdict is Verdict.VIOLATION


def test_final_reads_pin_incomplete_updates():
    h = [op(kv.incr("c"), 0, 1, 1), op(kv.incr("c"), 2, None)]
    assert check_linearizable(with_final_reads(h, {"c": 2})).ok
    assert check_linearizable(with_final_reads(h, {"c": 1})).ok
    assert check_linearizable(with_final_reads(h, {"c": 3})).verdict is Verdict.VIOLATION


def test_tiny_budget_is_inconclusive():
    # Ten writes that may or may not have happened, then an impossible read.
    h = [op(kv.put(f"v{i}", "x"), 0, None, client=i) for i in range(10)]
    h.append(op(kv.get("x"), 101, 102, "never"))
    assert check_linearizable(h, budget=50).verdict is Verdict.INCONCLUSIVE
    assert check_linearizable(h).verdict is Verdict.VIOLATION


def test_history_from_trace_and_json_round_trip():
    t = Trace()
    put = kv.put("1", "x")
    t.append(TraceRecord(0, "event", "client0", None,
                         {"event": "invoke", "client": 0, "op_id": 1, "kind": "update", "op": put.to_json(),
                          "rpc": [0, 1]}))
    t.append(TraceRecord(2, "event", "client0", None,
                         {"event": "complete", "client": 0, "op_id": 1, "kind": "update", "op": put.to_json(),
                          "rpc": [0, 1], "result": Result((None,)).to_json(), "reason": "witnesses"}))
    from_records = operations(history_from_trace(t))
    import json
    from_json = operations(history_from_trace([json.loads(line) for line in t.dumps().splitlines()]))
    assert [o.to_json() for o in from_records] == [o.to_json() for o in from_json]
    (o,) = from_records
    assert o.completed and o.complete_tick == 2 and o.reason == "witnesses"
    assert classify_rtt(from_records).histogram == {1.0: 1}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["put", "incr", "get"]), st.sampled_from("ab"),
                          st.integers(0, 3), st.integers(1, 4)), min_size=1, max_size=9))
def test_any_real_sequential_run_is_accepted(script):
    """Run ops one at a time through the model with some overlap; results stay linearizable."""
    state, h, t = {}, [], 0
    for kind, key, gap, dur in script:
        o = {"put": kv.put(f"v{t}", key), "incr": kv.incr(f"n{key}"), "get": kv.get(key)}[kind]
        res = step(state, o)
        h.append(op(o, t, t + dur, *res.values))
        t += dur + gap
    assert check_linearizable(h).ok


def _backup_read(o, start, end, *values):
    r = op(o, start, end, *values)
    r.op_kind = "read_backup"
    return r


def test_backup_read_older_than_last_completed_write_is_flagged():
    w1 = op(kv.put("1", "x"), 0, 1, None)
    w2 = op(kv.put("2", "x"), 2, 3, "1")
    stale = _backup_read(kv.get("x"), 4, 5, "1")
    fresh = _backup_read(kv.get("x"), 4, 5, "2")
    assert backup_read_violations([w1, w2, stale, fresh]) == [stale]


def test_backup_read_may_see_a_concurrent_write():
    w1 = op(kv.put("1", "x"), 0, 1, None)
    w2 = op(kv.put("2", "x"), 3, None)
    r = _backup_read(kv.get("x"), 2, 5, "2")
    assert backup_read_violations([w1, w2, r]) == []
    assert backup_read_violations([w1, w2, _backup_read(kv.get("x"), 2, 5, None)]) != []


def test_backup_read_of_counter_with_unfinished_increment():
    a = op(kv.incr("c"), 0, 1, 1)
    b = op(kv.incr("c"), 2, None)
    assert backup_read_violations([a, b, _backup_read(kv.get("c"), 3, 4, 2)]) == []
    assert backup_read_violations([a, b, _backup_read(kv.get("c"), 3, 4, None)]) != []
    assert backup_read_violations([_backup_read(kv.get("c"), 0, 1, None)]) == []
