"""Linearizability checking of recorded client histories.

Histories come from the ``invoke``/``complete`` events clients write into
the trace.  Real-time order is the order of those events in the trace,
which is finer than ticks: an operation that completed earlier in the same
tick precedes one invoked later in it.

The search is Wing and Gong's: repeatedly pick a minimal pending operation,
apply it to a sequential model and backtrack on a mismatch, memoising
``(linearised set, state)`` pairs that already failed.  Operations on
disjoint keys are independent, so the history is first split into
components (union-find over the keys each operation touches) and every
component is searched on its own.  Operations that never completed may be
placed anywhere after their invocation or left out.
"""

from __future__ import annotations

import enum
import json
import math
import sys
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from curpsim.kv import KvOp, OpKind, Result, TYPE_ERROR, Value
from curpsim.rifl import RpcId

DEFAULT_BUDGET = 2_000_000


class Verdict(str, enum.Enum):
    OK = "Ok"
    VIOLATION = "Violation"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class HistoryEvent:
    client_id: int
    op_id: int
    kind: str  # "invoke" or "complete"
    op: KvOp
    tick: int
    index: int  # position in the trace
    rpc_id: Optional[RpcId] = None
    result: Optional[Result] = None
    reason: Optional[str] = None
    op_kind: str = "update"


@dataclass
class Operation:
    """An invocation paired with its completion, if any."""

    client_id: int
    op_id: int
    op: KvOp
    invoke: int
    complete: float  # math.inf while incomplete
    invoke_tick: int
    complete_tick: Optional[int] = None
    result: Optional[Result] = None
    rpc_id: Optional[RpcId] = None
    reason: Optional[str] = None
    op_kind: str = "update"

    @property
    def completed(self) -> bool:
        return self.complete != math.inf

    def to_json(self) -> dict:
        return {
            "client": self.client_id, "opId": self.op_id, "op": self.op.to_json(),
            "invoke": self.invoke_tick, "complete": self.complete_tick,
            "result": None if self.result is None else self.result.to_json(),
            "rpc": None if self.rpc_id is None else self.rpc_id.to_json(), "kind": self.op_kind,
        }


@dataclass
class CheckResult:
    verdict: Verdict
    order: list[Operation] = field(default_factory=list)  # one linearization, per component
    violation: list[Operation] = field(default_factory=list)  # the failing component
    explored: int = 0

    @property
    def ok(self) -> bool:
        return self.verdict is Verdict.OK

    def to_json(self) -> dict:
        return {"verdict": self.verdict.value, "explored": self.explored,
                "violation": [o.to_json() for o in self.violation]}


# -- history extraction -----------------------------------------------------------


def history_from_trace(trace: Iterable) -> list[HistoryEvent]:
    """Pull client invoke/complete events out of a trace (records or JSON dicts)."""
    out = []
    for i, rec in enumerate(trace):
        if isinstance(rec, dict):
            kind, summary, tick = rec.get("kind"), rec.get("payloadSummary"), rec.get("tick")
        else:
            kind, summary, tick = rec.kind, rec.summary, rec.tick
        if kind != "event" or not isinstance(summary, dict):
            continue
        name = summary.get("event")
        if name not in ("invoke", "complete"):
            continue
        rpc = summary.get("rpc")
        out.append(HistoryEvent(
            client_id=summary["client"], op_id=summary["op_id"], kind=name,
            op=KvOp.from_json(summary["op"]), tick=tick, index=i,
            rpc_id=None if rpc is None else RpcId.from_json(rpc),
            result=Result.from_json(summary["result"]) if "result" in summary else None,
            reason=summary.get("reason"), op_kind=summary.get("kind", "update"),
        ))
    return out


def operations(events: Sequence[HistoryEvent]) -> list[Operation]:
    ops: dict[tuple[int, int], Operation] = {}
    for e in events:
        key = (e.client_id, e.op_id)
        if e.kind == "invoke":
            if key in ops:
                raise ValueError(f"operation {key} invoked twice")
            ops[key] = Operation(e.client_id, e.op_id, e.op, e.index, math.inf, e.tick, rpc_id=e.rpc_id,
                                 op_kind=e.op_kind)
        else:
            o = ops.get(key)
            if o is None:
                raise ValueError(f"operation {key} completed without an invocation")
            if o.completed:
                raise ValueError(f"operation {key} completed twice")
            o.complete, o.complete_tick, o.result, o.reason = e.index, e.tick, e.result, e.reason
    return sorted(ops.values(), key=lambda o: o.invoke)


# -- sequential model ---------------------------------------------------------------


def step(state: dict[str, Value], op: KvOp) -> Result:
    """Apply ``op`` to a plain dict (in place) and return its result."""
    old = tuple(state.get(k) for k in op.keys)
    if op.kind is OpKind.GET:
        return Result(old)
    if op.kind is OpKind.INCREMENT:
        if any(v is not None and not isinstance(v, int) for v in old):
            return Result(old, TYPE_ERROR)
        new = tuple((v or 0) + op.delta for v in old)
        state.update(zip(op.keys, new))
        return Result(new)
    for k in op.keys:
        if op.kind is OpKind.SET:
            state[k] = op.value
        else:
            state.pop(k, None)
    return Result(old)


def _freeze(state: dict) -> tuple:
    return tuple(sorted(state.items()))


# -- partitioning ---------------------------------------------------------------------


def components(ops: Sequence[Operation]) -> list[list[Operation]]:
    parent: dict[str, str] = {}

    def find(k: str) -> str:
        while parent.setdefault(k, k) != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for o in ops:
        root = find(o.op.keys[0])
        for k in o.op.keys[1:]:
            parent[find(k)] = root
    groups: dict[str, list[Operation]] = {}
    for o in ops:
        groups.setdefault(find(o.op.keys[0]), []).append(o)
    return list(groups.values())


# -- search -----------------------------------------------------------------------------


class _Budget(Exception):
    pass


def _search(ops: list[Operation], initial: dict, budget: int) -> tuple[Optional[list[int]], int]:
    """Find a linearization of ``ops`` or return None; raises _Budget."""
    n = len(ops)
    must = 0
    for i, o in enumerate(ops):
        if o.completed:
            must |= 1 << i
    failed: set = set()
    explored = 0
    order: list[int] = []

    def dfs(done: int, state: dict) -> bool:
        nonlocal explored
        if done & must == must:
            return True
        key = (done, _freeze(state))
        if key in failed:
            return False
        explored += 1
        if explored > budget:
            raise _Budget
        horizon = math.inf
        for i in range(n):
            if not done >> i & 1 and ops[i].complete < horizon:
                horizon = ops[i].complete
        for i in range(n):
            o = ops[i]
            if o.invoke > horizon:
                break  # sorted by invocation
            if done >> i & 1:
                continue
            nxt = dict(state)
            res = step(nxt, o.op)
            if o.completed and res != o.result:
                continue
            order.append(i)
            if dfs(done | 1 << i, nxt):
                return True
            order.pop()
        failed.add(key)
        return False

    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 4 * n + 1000))
    try:
        found = dfs(0, dict(initial))
    finally:
        sys.setrecursionlimit(limit)
    return (order if found else None), explored


def check_linearizable(history: Sequence[HistoryEvent] | Sequence[Operation], *,
                       initial: Optional[dict] = None, budget: int = DEFAULT_BUDGET) -> CheckResult:
    """Decide whether the completed operations of ``history`` are linearizable."""
    ops = list(history)
    if ops and isinstance(ops[0], HistoryEvent):
        ops = operations(ops)
    # An incomplete read changes nothing and constrains nothing.
    ops = [o for o in ops if o.completed or o.op.is_update]
    initial = initial or {}
    result = CheckResult(Verdict.OK)
    for comp in components(ops):
        keys = {k for o in comp for k in o.op.keys}
        start = {k: v for k, v in initial.items() if k in keys}
        try:
            order, explored = _search(comp, start, max(1, budget - result.explored))
        except _Budget:
            return CheckResult(Verdict.INCONCLUSIVE, violation=comp, explored=budget)
        result.explored += explored
        if order is None:
            return CheckResult(Verdict.VIOLATION, violation=comp, explored=result.explored)
        result.order.extend(comp[i] for i in order)
    return result


def with_final_reads(ops: Sequence[Operation], final: dict[str, Value]) -> list[Operation]:
    """Append one read per key observing ``final``, after everything else.

    Forces the chosen linearization, including which incomplete updates
    took effect, to explain the final state.
    """
    ops = list(ops)
    end = max([o.complete for o in ops if o.completed] + [o.invoke for o in ops] + [0]) + 1
    keys = sorted({k for o in ops for k in o.op.keys} | set(final))
    for i, k in enumerate(keys):
        ops.append(Operation(-1, i, KvOp(OpKind.GET, (k,)), end + 2 * i, end + 2 * i + 1, -1, -1,
                             Result((final.get(k),)), op_kind="final"))
    return ops


# -- latency ------------------------------------------------------------------------------


@dataclass
class RttReport:
    latencies: list[float]  # (complete - invoke) / 2 per completed op
    histogram: dict[float, int]

    def fraction_at_least(self, rtts: float) -> float:
        if not self.latencies:
            return 0.0
        return sum(1 for x in self.latencies if x >= rtts) / len(self.latencies)

    def to_csv(self) -> str:
        lines = ["rtt,count"]
        lines += [f"{k:g},{v}" for k, v in sorted(self.histogram.items())]
        return "\n".join(lines) + "\n"


def classify_rtt(ops: Sequence[Operation], *, kinds: Optional[set[str]] = None,
                 ticks_per_rtt: int = 2) -> RttReport:
    lat = [(o.complete_tick - o.invoke_tick) / ticks_per_rtt for o in ops
           if o.completed and (kinds is None or o.op_kind in kinds)]
    return RttReport(lat, dict(Counter(lat)))


def check_trace_file(path: str, budget: int = DEFAULT_BUDGET) -> CheckResult:
    with open(path) as fp:
        records = [json.loads(line) for line in fp if line.strip()]
    return check_linearizable(history_from_trace(records), budget=budget)


# -- reads served by backups -----------------------------------------------------------------


def _written(o: Operation, key: str) -> Optional[tuple[Value]]:
    """The value an update left in ``key``, or None when it is unknown."""
    if o.op.kind is OpKind.SET:
        return (o.op.value,)
    if o.op.kind is OpKind.DEL:
        return (None,)
    if o.completed and o.result is not None and o.result.error is None:
        return (o.result.values[o.op.keys.index(key)],)
    return None


def backup_read_violations(ops: Sequence[Operation], kinds: frozenset = frozenset({"read_backup"})) -> list[Operation]:
    """Completed reads (of ``kinds``) that returned a value older than the last completed write.

    For a read of key ``k`` let ``w`` be the last update of ``k`` that
    completed before the read was invoked.  The read may return what ``w``
    wrote, or what any update of ``k`` not entirely before ``w`` and invoked
    before the read completed wrote.  Increments whose result is unknown
    admit any integer at least as large as ``w``'s.
    """
    updates: dict[str, list[Operation]] = {}
    for o in ops:
        if o.op.is_update:
            for k in o.op.keys:
                updates.setdefault(k, []).append(o)
    bad = []
    for r in ops:
        if r.op_kind not in kinds or not r.completed or r.result is None:
            continue
        key, got = r.op.keys[0], r.result.values[0]
        history = updates.get(key, [])
        before = [u for u in history if u.completed and u.complete < r.invoke]
        last = max(before, key=lambda u: u.complete, default=None)
        floor = None if last is None else last.invoke
        candidates = [u for u in history if u.invoke < r.complete and (floor is None or u.complete > floor)]
        allowed: set = set() if last is not None else {None}
        open_incr = False
        for u in candidates:
            vals = _written(u, key)
            if vals is None:
                open_incr = True
            else:
                allowed.add(vals[0])
        if got in allowed:
            continue
        if open_incr and isinstance(got, int):
            prev = _written(last, key) if last is not None else (0,)
            base = prev[0] if prev is not None else None
            if not isinstance(base, int) or got >= base:
                continue
        bad.append(r)
    return bad
