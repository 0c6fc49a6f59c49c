"""Deterministic discrete-event scheduler with a lossy, reordering network.

Time is counted in ticks; one network hop takes one tick with the default
fixed delay, so a client round trip is two ticks.  Every random choice goes
through one seeded ``random.Random`` so a run is replayable bit for bit.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Optional, TextIO


class Role(str, enum.Enum):
    CLIENT = "client"
    MASTER = "master"
    BACKUP = "backup"
    WITNESS = "witness"
    COORDINATOR = "coordinator"


@dataclass(frozen=True, order=True)
class NodeId:
    role: Role
    index: int

    def __str__(self) -> str:
        return f"{self.role.value}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        for role in Role:
            if text.startswith(role.value) and text[len(role.value):].isdigit():
                return cls(role, int(text[len(role.value):]))
        raise ValueError(f"not a node id: {text!r}")


@dataclass(frozen=True)
class Message:
    src: NodeId
    dst: NodeId
    payload: Any
    send_time: int


# -- fault plan --------------------------------------------------------------


@dataclass(frozen=True)
class Delay:
    """Per-hop delay distribution in ticks; samples are never below 1."""

    kind: str = "fixed"
    a: float = 1
    b: float = 1

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "exponential"):
            raise ValueError(f"unknown delay distribution {self.kind!r}")
        if self.kind == "uniform" and not 1 <= self.a <= self.b:
            raise ValueError("uniform delay needs 1 <= min <= max")
        if self.kind != "uniform" and self.a <= 0:
            raise ValueError("delay must be positive")

    @classmethod
    def fixed(cls, ticks: int = 1) -> "Delay":
        return cls("fixed", ticks, ticks)

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "Delay":
        return cls("uniform", lo, hi)

    @classmethod
    def exponential(cls, mean: float) -> "Delay":
        return cls("exponential", mean, mean)

    def sample(self, rng: random.Random) -> int:
        if self.kind == "fixed":
            return max(1, int(self.a))
        if self.kind == "uniform":
            return rng.randint(int(self.a), int(self.b))
        return max(1, math.ceil(rng.expovariate(1.0 / self.a)))

    def to_json(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "ticks": int(self.a)}
        if self.kind == "uniform":
            return {"kind": "uniform", "min": int(self.a), "max": int(self.b)}
        return {"kind": "exponential", "mean": self.a}

    @classmethod
    def from_json(cls, d: dict) -> "Delay":
        kind = d.get("kind", "fixed")
        if kind == "fixed":
            return cls.fixed(int(d.get("ticks", 1)))
        if kind == "uniform":
            return cls.uniform(int(d["min"]), int(d["max"]))
        if kind == "exponential":
            return cls.exponential(float(d["mean"]))
        raise ValueError(f"unknown delay distribution {kind!r}")


@dataclass(frozen=True)
class Partition:
    """Messages between ``side_a`` and ``side_b`` are lost during [start, end]."""

    start: int
    end: int
    side_a: frozenset[str]
    side_b: frozenset[str]

    def __post_init__(self) -> None:
        if self.start > self.end:
            raise ValueError("partition interval must have start <= end")

    def cuts(self, a: NodeId, b: NodeId, now: int) -> bool:
        if not self.start <= now <= self.end:
            return False
        sa, sb = str(a), str(b)
        return (sa in self.side_a and sb in self.side_b) or (sa in self.side_b and sb in self.side_a)


@dataclass(frozen=True)
class Crash:
    """Crash ``target`` at ``at``; restart at ``restart`` if given.

    ``target`` is a node name such as ``"witness1"`` or the alias
    ``"master"``, meaning whichever master currently serves partition 0.
    """

    target: str
    at: int
    restart: Optional[int] = None

    def __post_init__(self) -> None:
        if self.restart is not None and self.restart < self.at:
            raise ValueError("restart before crash")


@dataclass(frozen=True)
class FaultPlan:
    drop_probability: float = 0.0
    delay: Delay = field(default_factory=Delay)
    partitions: tuple[Partition, ...] = ()
    crashes: tuple[Crash, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop probability must be in [0, 1]")

    def to_json(self) -> dict:
        return {
            "dropProbability": self.drop_probability,
            "delay": self.delay.to_json(),
            "partitions": [
                {"start": p.start, "end": p.end, "sideA": sorted(p.side_a), "sideB": sorted(p.side_b)}
                for p in self.partitions
            ],
            "crashes": [{"target": c.target, "at": c.at, "restart": c.restart} for c in self.crashes],
        }

    @classmethod
    def from_json(cls, d: dict) -> "FaultPlan":
        return cls(
            drop_probability=float(d.get("dropProbability", 0.0)),
            delay=Delay.from_json(d.get("delay", {})),
            partitions=tuple(
                Partition(p["start"], p["end"], frozenset(p["sideA"]), frozenset(p["sideB"]))
                for p in d.get("partitions", ())
            ),
            crashes=tuple(Crash(c["target"], c["at"], c.get("restart")) for c in d.get("crashes", ())),
        )


# -- trace -------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    kind: str
    src: Optional[str]
    dst: Optional[str]
    summary: Any

    def to_json(self) -> dict:
        summary = self.summary
        if hasattr(summary, "summary"):
            summary = summary.summary()
        elif not isinstance(summary, (dict, str, type(None))):
            summary = str(summary)
        return {"tick": self.tick, "kind": self.kind, "src": self.src, "dst": self.dst,
                "payloadSummary": summary}


class Trace(list):
    """Ordered list of :class:`TraceRecord`."""

    def of_kind(self, *kinds: str) -> Iterator[TraceRecord]:
        return (r for r in self if r.kind in kinds)

    def events(self, name: str) -> Iterator[TraceRecord]:
        return (r for r in self if r.kind == "event" and r.summary.get("event") == name)

    def dump(self, fp: TextIO) -> None:
        for rec in self:
            fp.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")

    def dumps(self) -> str:
        return "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in self)

    @classmethod
    def load(cls, lines: Iterable[str]) -> "Trace":
        out = cls()
        for line in lines:
            line = line.strip()
            if line:
                d = json.loads(line)
                out.append(TraceRecord(d["tick"], d["kind"], d.get("src"), d.get("dst"), d.get("payloadSummary")))
        return out


class Livelock(RuntimeError):
    def __init__(self, tick: int, pending: int, trace: Trace):
        super().__init__(f"tick budget exhausted at {tick} with {pending} pending events")
        self.trace = trace


# -- nodes -------------------------------------------------------------------


class Node:
    """Base class for simulated processes.

    Handlers are looked up as ``on_<PayloadClassName>``.  A node touches
    other nodes only through :meth:`send`.
    """

    def __init__(self, node_id: NodeId):
        self.id = node_id
        self.sim: Optional[Simulator] = None
        self.alive = True
        self.incarnation = 0
        self._calls: dict[int, tuple[NodeId, Any, int]] = {}
        self._req_ids = itertools.count(1)

    def attach(self, sim: "Simulator") -> None:
        self.sim = sim

    @property
    def now(self) -> int:
        return self.sim.now

    def send(self, dst: NodeId, payload: Any) -> None:
        self.sim.send(self.id, dst, payload)

    def after(self, delay: int, fn: Callable[[], None]) -> None:
        """Run ``fn`` on this node ``delay`` ticks from now (0 = end of tick)."""
        self.sim.set_timer(self.id, delay, fn)

    def event(self, name: str, **fields: Any) -> None:
        self.sim.event(self.id, name, **fields)

    def next_req_id(self) -> int:
        return next(self._req_ids)

    def call(self, dst: NodeId, payload: Any, *, retry: int = 20,
             redirect: Optional[Callable[[NodeId, int], NodeId]] = None) -> None:
        """Send ``payload`` and resend it every ``retry`` ticks until settled.

        ``payload.req_id`` identifies the call; the reply handler calls
        :meth:`settle`.  ``redirect(dst, tries)`` may pick a new destination
        before each resend.
        """
        self._calls[payload.req_id] = (dst, payload, 0)
        self.send(dst, payload)
        self.after(retry, lambda: self._resend(payload.req_id, retry, redirect))

    def _resend(self, req_id: int, retry: int, redirect) -> None:
        pending = self._calls.get(req_id)
        if pending is None:
            return
        dst, payload, tries = pending
        tries += 1
        if redirect is not None:
            dst = redirect(dst, tries)
        self._calls[req_id] = (dst, payload, tries)
        self.send(dst, payload)
        self.after(retry, lambda: self._resend(req_id, retry, redirect))

    def settle(self, req_id: int) -> bool:
        """Mark call ``req_id`` answered; False if it was not outstanding."""
        return self._calls.pop(req_id, None) is not None

    def outstanding(self, req_id: int) -> bool:
        return req_id in self._calls

    def deliver(self, msg: Message) -> None:
        handler = getattr(self, "on_" + type(msg.payload).__name__, None)
        if handler is None:
            raise TypeError(f"{self.id} cannot handle {type(msg.payload).__name__}")
        handler(msg.src, msg.payload)

    def on_crash(self) -> None:
        """Discard volatile state.  Default: nothing survives but the object."""

    def on_restart(self) -> None:
        pass


# -- scheduler ---------------------------------------------------------------

_DELIVER, _TIMER, _CONTROL = 0, 1, 2


class Simulator:
    def __init__(self, seed: int = 0, faults: Optional[FaultPlan] = None, *, trace_messages: bool = True):
        self.seed = seed
        self.rng = random.Random(seed)
        self.faults = faults or FaultPlan()
        self.now = 0
        self.nodes: dict[NodeId, Node] = {}
        self.trace = Trace()
        self.trace_messages = trace_messages
        self._queue: list = []
        self._seq = itertools.count()
        self.sent = 0
        self.dropped = 0

    # setup
    def add(self, node: Node) -> Node:
        if node.id in self.nodes:
            raise ValueError(f"duplicate node {node.id}")
        self.nodes[node.id] = node
        node.attach(self)
        return node

    def node_rng(self, node_id: NodeId) -> random.Random:
        return random.Random(f"{self.seed}/{node_id}")

    def _push(self, when: int, kind: int, data: Any) -> None:
        heapq.heappush(self._queue, (when, next(self._seq), kind, data))

    # network
    def _cut(self, a: NodeId, b: NodeId) -> bool:
        return any(p.cuts(a, b, self.now) for p in self.faults.partitions)

    def schedule(self, msg: Message) -> None:
        """Enqueue delivery of ``msg`` or lose it according to the fault plan."""
        self.sent += 1
        if self.faults.drop_probability and self.rng.random() < self.faults.drop_probability:
            self._drop(msg, "loss")
            return
        if self._cut(msg.src, msg.dst):
            self._drop(msg, "partition")
            return
        delay = self.faults.delay.sample(self.rng)
        if self.trace_messages:
            self.trace.append(TraceRecord(self.now, "send", str(msg.src), str(msg.dst), msg.payload))
        self._push(self.now + delay, _DELIVER, msg)

    def send(self, src: NodeId, dst: NodeId, payload: Any) -> None:
        node = self.nodes.get(src)
        if node is not None and not node.alive:
            return  # fail-stop: the dead stay silent
        self.schedule(Message(src, dst, payload, self.now))

    def _drop(self, msg: Message, reason: str) -> None:
        self.dropped += 1
        if self.trace_messages:
            self.trace.append(TraceRecord(self.now, "drop", str(msg.src), str(msg.dst),
                                          {"reason": reason, "payload": _summary(msg.payload)}))

    # timers and control
    def set_timer(self, node_id: NodeId, delay: int, fn: Callable[[], None]) -> None:
        node = self.nodes[node_id]
        self._push(self.now + max(0, delay), _TIMER, (node_id, node.incarnation, fn))

    def at(self, tick: int, fn: Callable[[], None]) -> None:
        """Scenario hook: run ``fn`` outside any node at ``tick``."""
        self._push(max(tick, self.now), _CONTROL, fn)

    def event(self, src: Optional[NodeId], name: str, **fields: Any) -> None:
        fields["event"] = name
        self.trace.append(TraceRecord(self.now, "event", None if src is None else str(src), None, fields))

    # lifecycle
    def crash(self, node_id: NodeId, at: Optional[int] = None) -> None:
        if at is not None and at > self.now:
            self.at(at, lambda: self.crash(node_id))
            return
        node = self.nodes[node_id]
        if not node.alive:
            return
        node.alive = False
        node.incarnation += 1
        node._calls.clear()
        node.on_crash()
        self.trace.append(TraceRecord(self.now, "crash", str(node_id), None, None))

    def restart(self, node_id: NodeId, at: Optional[int] = None) -> None:
        if at is not None and at > self.now:
            self.at(at, lambda: self.restart(node_id))
            return
        node = self.nodes[node_id]
        if node.alive:
            return
        node.alive = True
        node.incarnation += 1
        self.trace.append(TraceRecord(self.now, "restart", str(node_id), None, None))
        node.on_restart()

    # main loop
    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        if not self._queue:
            return False
        when, _, kind, data = heapq.heappop(self._queue)
        self.now = when
        if kind == _DELIVER:
            msg: Message = data
            node = self.nodes.get(msg.dst)
            if node is None or not node.alive:
                self._drop(msg, "crashed")
            elif self._cut(msg.src, msg.dst):
                self._drop(msg, "partition")
            else:
                if self.trace_messages:
                    self.trace.append(TraceRecord(self.now, "deliver", str(msg.src), str(msg.dst), msg.payload))
                node.deliver(msg)
        elif kind == _TIMER:
            node_id, incarnation, fn = data
            node = self.nodes[node_id]
            if node.alive and node.incarnation == incarnation:
                fn()
        else:
            data()
        return True

    def run_until(self, tick: int) -> None:
        while self._queue and self._queue[0][0] <= tick:
            self.step()
        self.now = max(self.now, tick)

    def run_until_quiescent(self, max_ticks: int = 1_000_000) -> Trace:
        while self._queue:
            if self._queue[0][0] > max_ticks:
                raise Livelock(self.now, len(self._queue), self.trace)
            self.step()
        return self.trace


def _summary(payload: Any) -> Any:
    return payload.summary() if hasattr(payload, "summary") else str(payload)
