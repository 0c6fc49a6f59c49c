"""Scenario runner, metrics and the witness associativity experiment."""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

from curpsim.checker import (
    CheckResult,
    Verdict,
    check_linearizable,
    classify_rtt,
    history_from_trace,
    operations,
    with_final_reads,
)
from curpsim.client import READ, READ_BACKUP, UPDATE
from curpsim.cluster import Cluster
from curpsim.kv import OpKind
from curpsim.rifl import RpcId
from curpsim.sim import Crash, Delay, FaultPlan, Role
from curpsim.witness import WitnessStore
from curpsim.workload import Uniform, Zipfian, mixed, zeta


@dataclass
class Scenario:
    seed: int = 0
    f: int = 3
    num_clients: int = 4
    num_keys: int = 100_000
    workload: str = "uniform"
    theta: float = 0.99
    op_mix: float = 1.0  # fraction of operations that are writes
    batch_limit: int = 50
    preemptive_sync: bool = True
    fault_plan: FaultPlan = field(default_factory=FaultPlan)
    duration_ticks: int = 1000
    ops_per_client: Optional[int] = None
    backup_read_fraction: float = 0.0  # of reads
    incr_fraction: float = 0.0  # of writes, spread over ``counter_keys`` counters
    counter_keys: int = 0
    replace_witnesses: bool = True
    drain_ticks: int = 3000
    client_timeout: int = 50
    trace_messages: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.f <= 3:
            raise ValueError(f"f must be in 1..3, got {self.f}")
        if self.workload not in ("uniform", "zipfian"):
            raise ValueError(f"unknown workload {self.workload!r}")
        if self.workload == "zipfian" and not 0 < self.theta <= 1:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if self.num_clients < 1 or self.num_keys < 1:
            raise ValueError("numClients and numKeys must be positive")
        for name in ("op_mix", "backup_read_fraction", "incr_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.batch_limit < 1 or self.duration_ticks < 0:
            raise ValueError("batchLimit must be positive and durationTicks non-negative")

    _JSON = {
        "seed": "seed", "f": "f", "numClients": "num_clients", "numKeys": "num_keys", "opMix": "op_mix",
        "batchLimit": "batch_limit", "preemptiveSync": "preemptive_sync", "durationTicks": "duration_ticks",
        "opsPerClient": "ops_per_client", "backupReadFraction": "backup_read_fraction",
        "incrFraction": "incr_fraction", "counterKeys": "counter_keys", "replaceWitnesses": "replace_witnesses",
        "drainTicks": "drain_ticks", "clientTimeout": "client_timeout", "traceMessages": "trace_messages",
    }

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        unknown = set(d) - set(cls._JSON) - {"workload", "faultPlan"}
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        kw = {attr: d[key] for key, attr in cls._JSON.items() if key in d}
        wl = d.get("workload", {"kind": "uniform"})
        if isinstance(wl, str):
            wl = {"kind": wl}
        kw["workload"] = wl.get("kind", "uniform")
        if "theta" in wl:
            kw["theta"] = float(wl["theta"])
        kw["fault_plan"] = FaultPlan.from_json(d.get("faultPlan", {}))
        return cls(**kw)

    def to_json(self) -> dict:
        d = {key: getattr(self, attr) for key, attr in self._JSON.items()}
        d["workload"] = {"kind": self.workload, "theta": self.theta}
        d["faultPlan"] = self.fault_plan.to_json()
        return d

    @classmethod
    def load(cls, path: str) -> "Scenario":
        with open(path) as fp:
            return cls.from_json(json.load(fp))


@dataclass
class MetricsReport:
    seed: int
    rtt_histogram: dict  # write latency in RTTs -> count
    read_rtt_histogram: dict
    ops_completed: int
    writes_completed: int
    ops_incomplete: int
    witness_accepts: int
    witness_rejects: int
    backup_rpc_count: int
    gc_rpc_count: int
    update_rpc_count: int
    sync_rpc_count: int
    avg_rpcs_per_write: float
    slow_write_fraction: float  # writes taking at least 2 RTT
    linearizability_verdict: str
    final_state_checked: bool
    failures: list = field(default_factory=list)
    final_tick: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_json(self) -> dict:
        d = asdict(self)
        out = {}
        for k, v in d.items():
            head, *rest = k.split("_")
            out[head + "".join(w.title() for w in rest)] = v
        out["rttHistogram"] = {f"{k:g}": v for k, v in sorted(self.rtt_histogram.items())}
        out["readRttHistogram"] = {f"{k:g}": v for k, v in sorted(self.read_rtt_histogram.items())}
        return out

    def histogram_csv(self) -> str:
        rows = ["kind,rtt,count"]
        rows += [f"write,{k:g},{v}" for k, v in sorted(self.rtt_histogram.items())]
        rows += [f"read,{k:g},{v}" for k, v in sorted(self.read_rtt_histogram.items())]
        return "\n".join(rows) + "\n"


# -- building and running -------------------------------------------------------------


def build(scenario: Scenario) -> Cluster:
    cluster = Cluster(scenario.seed, scenario.fault_plan, f=scenario.f, batch_limit=scenario.batch_limit,
                      preemptive_sync=scenario.preemptive_sync, replace_witnesses=scenario.replace_witnesses,
                      client_timeout=scenario.client_timeout, trace_messages=scenario.trace_messages)
    shared_zeta = zeta(scenario.num_keys, scenario.theta) if scenario.workload == "zipfian" else None
    for i in range(scenario.num_clients):
        rng = random.Random(f"{scenario.seed}/workload/{i}")
        if scenario.workload == "zipfian":
            chooser = Zipfian(scenario.num_keys, scenario.theta, rng, shared_zeta)
        else:
            chooser = Uniform(scenario.num_keys, rng)
        ops = mixed(chooser, rng, write_fraction=scenario.op_mix,
                    backup_read_fraction=scenario.backup_read_fraction, incr_fraction=scenario.incr_fraction,
                    counter_keys=scenario.counter_keys, tag=f"c{i}.")
        cluster.add_client(ops, max_ops=scenario.ops_per_client, stop_at=scenario.duration_ticks)
    return cluster


def _settled(cluster: Cluster) -> bool:
    if any(c.alive and c.current is not None for c in cluster.clients):
        return False
    if any(not cluster.sim.nodes[p.config.master].alive for p in cluster.coordinator.parts):
        return False  # a crash not yet handled
    return all(p.busy is None or p.busy["kind"] != "recover" for p in cluster.coordinator.parts)


def run(scenario: Scenario) -> Cluster:
    """Run the workload for ``duration_ticks``, then let in-flight work finish."""
    cluster = build(scenario)
    cluster.run(scenario.duration_ticks)
    end = scenario.duration_ticks + scenario.drain_ticks
    while cluster.sim.now < end and not _settled(cluster):
        cluster.run(cluster.sim.now + 10)
    return cluster


def final_state(cluster: Cluster) -> Optional[dict]:
    """Merged live state of every partition, or None if a master is not serving."""
    state = {}
    for p in range(len(cluster.coordinator.parts)):
        m = cluster.master(p)
        if not m.alive or m.dead or m.recovering:
            return None
        state.update({k: v for k, v in m.kv.snapshot().items() if m.owns((k,))})
    return state


def logged_rpcs(cluster: Cluster) -> Counter:
    """How often each RpcId was executed in the serving masters' logs."""
    seen: Counter = Counter()
    for p in range(len(cluster.coordinator.parts)):
        for e in cluster.master(p).log:
            if e.rpc_id is not None and e.op is not None:
                seen[e.rpc_id] += 1
    return seen


def evaluate(cluster: Cluster, scenario: Optional[Scenario] = None, *, budget: int = 2_000_000) -> tuple[MetricsReport, CheckResult]:
    trace = cluster.trace
    ops = operations(history_from_trace(trace))
    failures: list[str] = []

    final = final_state(cluster)
    history = with_final_reads(ops, final) if final is not None else ops
    check = check_linearizable(history, budget=budget)
    if check.verdict is not Verdict.OK:
        failures.append(f"linearizability: {check.verdict.value}")

    completed_updates = [o for o in ops if o.completed and o.op_kind == UPDATE]
    if final is not None:
        logged = logged_rpcs(cluster)
        twice = [str(r) for r, n in logged.items() if n > 1]
        if twice:
            failures.append(f"executed more than once: {twice[:5]}")
        migrated = _migrated_rpcs(cluster)
        lost = [str(o.rpc_id) for o in completed_updates if o.rpc_id not in logged and o.rpc_id not in migrated]
        if lost:
            failures.append(f"completed updates missing from the log: {lost[:5]}")
        failures += _counter_failures(ops, final, logged)

    failures += _completion_failures(trace)
    failures += _invariant_failures(cluster)

    writes = [o for o in ops if o.op_kind == UPDATE]
    wrtt = classify_rtt(writes)
    rrtt = classify_rtt([o for o in ops if o.op_kind in (READ, READ_BACKUP)])
    masters = cluster.all_of(Role.MASTER)
    witnesses = cluster.all_of(Role.WITNESS)
    n_writes = len(completed_updates)
    update_rpcs = sum(m.updates_received for m in masters)
    backup_rpcs = sum(m.backup_rpcs for m in masters)
    report = MetricsReport(
        seed=cluster.sim.seed,
        rtt_histogram=wrtt.histogram,
        read_rtt_histogram=rrtt.histogram,
        ops_completed=sum(1 for o in ops if o.completed),
        writes_completed=n_writes,
        ops_incomplete=sum(1 for o in ops if not o.completed),
        witness_accepts=sum(w.accepted for w in witnesses),
        witness_rejects=sum(w.rejected for w in witnesses),
        backup_rpc_count=backup_rpcs,
        gc_rpc_count=sum(m.gc_rpcs for m in masters),
        update_rpc_count=update_rpcs,
        sync_rpc_count=sum(c.sync_rpcs for c in cluster.clients),
        avg_rpcs_per_write=(update_rpcs + backup_rpcs) / n_writes if n_writes else 0.0,
        slow_write_fraction=wrtt.fraction_at_least(2),
        linearizability_verdict=check.verdict.value,
        final_state_checked=final is not None,
        failures=failures,
        final_tick=cluster.sim.now,
    )
    return report, check


def run_scenario(scenario: Scenario) -> tuple[MetricsReport, Cluster]:
    cluster = run(scenario)
    report, _ = evaluate(cluster, scenario)
    return report, cluster


# -- embedded assertions -----------------------------------------------------------------


def _migrated_rpcs(cluster: Cluster) -> set:
    out = set()
    for p in range(len(cluster.coordinator.parts)):
        for e in cluster.master(p).log:
            if e.control and e.control[0] == "install":
                out.update(r.rpc_id for r in e.control[2])
    return out


def _counter_failures(ops, final: dict, logged: Counter) -> list[str]:
    out = []
    incrs = [o for o in ops if o.op.kind is OpKind.INCREMENT]
    by_key: dict[str, list] = {}
    for o in incrs:
        by_key.setdefault(o.op.keys[0], []).append(o)
    for key, group in by_key.items():
        if any(o.op.delta != 1 for o in group):
            continue
        done = sum(1 for o in group if o.completed)
        applied = sum(1 for o in group if logged.get(o.rpc_id))
        value = final.get(key) or 0
        if not isinstance(value, int):
            continue
        if value != applied or not done <= value <= len(group):
            out.append(f"counter {key}: value {value}, {done} completed, {applied} logged, {len(group)} issued")
    return out


def _completion_failures(trace) -> list[str]:
    """Completion soundness and witness-list version safety."""
    out = []
    executed: dict = {}
    for rec in trace.events("execute"):
        executed[(rec.src, rec.summary["rpc"])] = rec.summary["version"]
    for rec in trace.events("complete"):
        s = rec.summary
        if s["kind"] != UPDATE:
            continue
        reason = s["reason"]
        if reason == "witnesses":
            if len(s["accepted"]) != len(s["witnesses"]):
                out.append(f"completed on {len(s['accepted'])}/{len(s['witnesses'])} witnesses: {s['rpc']}")
            v = executed.get((s["master"], str(RpcId.from_json(s["rpc"]))))
            if v is not None and v != s["version"]:
                out.append(f"op {s['rpc']} completed under version {s['version']}, executed under {v}")
        elif reason not in ("synced", "sync_rpc"):
            out.append(f"unknown completion reason {reason!r}")
    return out


def _invariant_failures(cluster: Cluster) -> list[str]:
    out = []
    for node in cluster.sim.nodes.values():
        check = None
        if node.id.role is Role.MASTER and node.alive and not node.dead:
            check = node.check_invariants
        elif node.id.role is Role.WITNESS:
            check = node.store.check_invariants
        elif node.id.role is Role.BACKUP:
            check = node.state.check_invariants
        if check is None:
            continue
        try:
            check()
        except AssertionError as exc:
            out.append(f"{node.id}: {exc}")
    return out


# -- randomized fault scenarios ------------------------------------------------------------


def random_fault_scenario(seed: int, *, duration: int = 300) -> Scenario:
    """A small workload with crashes of masters, witnesses and clients, plus loss."""
    rng = random.Random(f"faults/{seed}")
    f = rng.choice((1, 2, 3))
    clients = rng.randint(2, 5)
    crashes = []
    if rng.random() < 0.8:
        crashes.append(Crash("master", rng.randint(5, duration - 20)))
        if rng.random() < 0.3:
            crashes.append(Crash("master", crashes[0].at + rng.randint(1, 60)))
    if rng.random() < 0.5:
        at = rng.randint(5, duration - 20)
        # With f=1 a lost witness plus a master crash is beyond the fault model.
        restart = at + rng.randint(5, 80) if f == 1 or rng.random() < 0.8 else None
        crashes.append(Crash(f"witness{rng.randrange(f)}", at, restart))
    if rng.random() < 0.3:
        crashes.append(Crash(f"client{rng.randrange(clients)}", rng.randint(5, duration - 20)))
    plan = FaultPlan(drop_probability=round(rng.uniform(0, 0.1), 3), delay=Delay.uniform(1, 3),
                     crashes=tuple(crashes))
    return Scenario(seed=seed, f=f, num_clients=clients, num_keys=rng.randint(2, 6), op_mix=0.6,
                    batch_limit=rng.choice((3, 10, 50)), preemptive_sync=rng.random() < 0.5,
                    fault_plan=plan, duration_ticks=duration, backup_read_fraction=0.4,
                    incr_fraction=0.3, counter_keys=2, replace_witnesses=rng.random() < 0.7,
                    client_timeout=15, trace_messages=False)


# -- associativity experiment -------------------------------------------------------------------


def records_before_rejection(store: WitnessStore, rng: random.Random) -> int:
    store.end()
    store.start(None)
    n = 0
    draw, record = rng.getrandbits, store.record_hash
    while record(draw(64), n):
        n += 1
    return n


def run_associativity_experiment(slots: int = 4096, ways=(1, 2, 4, 8), trials: int = 10_000,
                                 seed: int = 0) -> dict[int, float]:
    """Mean number of random single-key records accepted before the first rejection."""
    out = {}
    for w in ways:
        if slots % w:
            raise ValueError(f"{slots} slots do not split into {w}-way sets")
        store = WitnessStore(slots // w, w)
        rng = random.Random(f"{seed}/{w}")
        out[w] = sum(records_before_rejection(store, rng) for _ in range(trials)) / trials
    return out


def birthday_estimate(slots: int) -> float:
    """Expected insertions before two land in one slot of a direct-mapped table."""
    return math.sqrt(math.pi * slots / 2)
