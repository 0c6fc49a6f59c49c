"""Client library, modelled as a closed-loop simulated node.

An update goes to the master and to every witness in the same tick.  It is
complete once the master has answered and either all witnesses accepted the
record, the answer was already synced, or a follow-up sync RPC succeeded.
Every retry of an operation reuses its ``RpcId``.

The history checker reads ``invoke`` and ``complete`` trace events emitted
here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

from curpsim.kv import KvOp, Result
from curpsim.messages import (
    ClientReply,
    ClientRequest,
    CommuteCheck,
    CommuteCheckReply,
    ConfigFetch,
    ConfigReply,
    PartitionConfig,
    ReadBackup,
    ReadBackupReply,
    Record,
    RecordReply,
    ReplyError,
    SyncRpc,
    SyncRpcReply,
    encode_request,
)
from curpsim.rifl import RpcId
from curpsim.sim import Node, NodeId

TIMEOUT = 50

UPDATE = "update"
READ = "read"
READ_BACKUP = "read_backup"


@dataclass
class _Op:
    op_id: int
    kind: str
    op: KvOp
    rpc_id: Optional[RpcId] = None
    attempt: int = 0
    invoked: int = 0
    # per-attempt state
    config: Optional[PartitionConfig] = None
    reply: Optional[ClientReply] = None
    accepted: set = field(default_factory=set)
    rejected: set = field(default_factory=set)
    sync_sent: bool = False
    stage: str = ""


class Client(Node):
    def __init__(self, node_id: NodeId, coordinator: NodeId, workload: Iterator[tuple[str, KvOp]],
                 *, timeout: int = TIMEOUT, max_ops: Optional[int] = None, stop_at: Optional[int] = None):
        super().__init__(node_id)
        self.coordinator = coordinator
        self.workload = workload
        self.timeout = timeout
        self.max_ops = max_ops
        self.stop_at = stop_at
        self.partitions: tuple[PartitionConfig, ...] = ()
        self.next_seq = 1
        self.acked = 0
        self.current: Optional[_Op] = None
        self.issued = 0
        self.completed = 0
        self.sync_rpcs = 0
        self.failed: Optional[str] = None
        self._fetch_req: Optional[int] = None

    @property
    def client_id(self) -> int:
        return self.id.index

    def start(self, at: int = 0) -> None:
        self.sim.at(at, self._next_op)

    def on_crash(self) -> None:
        self.current = None  # the in-flight op stays incomplete forever

    # -- operation loop -------------------------------------------------------

    def _next_op(self) -> None:
        if not self.alive or self.current is not None or self.failed:
            return
        if self.max_ops is not None and self.issued >= self.max_ops:
            return
        if self.stop_at is not None and self.now >= self.stop_at:
            return
        if not self.partitions:
            self._refresh()  # the first operation waits for a configuration
            return
        try:
            kind, op = next(self.workload)
        except StopIteration:
            return
        self.issued += 1
        cur = _Op(self.issued, kind, op, invoked=self.now)
        if kind == UPDATE:
            cur.rpc_id = RpcId(self.client_id, self.next_seq)
            self.next_seq += 1
        self.current = cur
        self.event("invoke", client=self.client_id, op_id=cur.op_id, kind=kind, op=op.to_json(),
                   rpc=None if cur.rpc_id is None else cur.rpc_id.to_json())
        self._attempt()

    def _complete(self, result: Result, reason: str) -> None:
        cur = self.current
        cfg = cur.config
        self.event("complete", client=self.client_id, op_id=cur.op_id, kind=cur.kind, op=cur.op.to_json(),
                   rpc=None if cur.rpc_id is None else cur.rpc_id.to_json(), result=result.to_json(),
                   reason=reason, attempt=cur.attempt, master=str(cfg.master),
                   version=cfg.witness_version, witnesses=[str(w) for w in cfg.witnesses],
                   accepted=sorted(str(w) for w in cur.accepted))
        if cur.rpc_id is not None:
            self.acked = cur.rpc_id.seq
        self.completed += 1
        self.current = None
        self._next_op()

    def _fail(self, why: str) -> None:
        self.failed = why
        self.event("session_failed", client=self.client_id, reason=why)
        self.current = None

    def _config_for(self, op: KvOp) -> Optional[PartitionConfig]:
        for cfg in self.partitions:
            if all(cfg.owns(k) for k in op.keys):
                return cfg
        return None

    def _attempt(self) -> None:
        """Start a fresh attempt of the current operation."""
        cur = self.current
        cfg = self._config_for(cur.op)
        if cfg is None:
            self._refresh()
            return
        cur.attempt += 1
        cur.config = cfg
        cur.reply = None
        cur.accepted, cur.rejected = set(), set()
        cur.sync_sent = False
        attempt = cur.attempt
        if cur.kind == UPDATE:
            req = ClientRequest(cur.op_id, attempt, cur.op, cur.rpc_id, cfg.witness_version, self.acked)
            data = encode_request(req)
            hashes = cur.op.key_hashes
            self.send(cfg.master, req)
            for w in cfg.witnesses:
                self.send(w, Record(cfg.master, hashes, cur.rpc_id, data, cur.op_id, attempt))
        elif cur.kind == READ_BACKUP and cfg.witnesses:
            cur.stage = "check"
            w = cfg.witnesses[self.client_id % len(cfg.witnesses)]
            self.send(w, CommuteCheck(cur.op_id, attempt, cfg.master, cur.op.key_hashes))
        else:
            self._read_master()
        self.after(self.timeout, lambda: self._timeout(cur.op_id, attempt))

    def _read_master(self) -> None:
        cur = self.current
        cur.stage = "master"
        self.send(cur.config.master, ClientRequest(cur.op_id, cur.attempt, cur.op))

    def _timeout(self, op_id: int, attempt: int) -> None:
        if self._is_current(op_id, attempt):
            self.event("client_timeout", client=self.client_id, op_id=op_id, attempt=attempt)
            self._refresh()

    def _is_current(self, op_id: int, attempt: int) -> bool:
        cur = self.current
        return cur is not None and cur.op_id == op_id and cur.attempt == attempt

    # -- configuration ----------------------------------------------------------

    def _refresh(self) -> None:
        """Fetch the configuration, then start a new attempt."""
        if self._fetch_req is not None and self.outstanding(self._fetch_req):
            return
        self._fetch_req = self.next_req_id()
        self.call(self.coordinator, ConfigFetch(self._fetch_req), retry=self.timeout)

    def on_ConfigReply(self, src: NodeId, m: ConfigReply) -> None:
        if not self.settle(m.req_id):
            return
        self.partitions = m.partitions
        if self.current is not None:
            self._attempt()
        else:
            self._next_op()

    # -- updates --------------------------------------------------------------------

    def on_ClientReply(self, src: NodeId, m: ClientReply) -> None:
        if not self._is_current(m.op_id, m.attempt):
            return
        cur = self.current
        if m.error is ReplyError.STALE_RPC:
            self._fail(f"stale rpc {cur.rpc_id}")
            return
        if m.error is not None:
            self.event("client_redirect", client=self.client_id, op_id=cur.op_id, error=m.error.value)
            self._refresh()
            return
        if cur.kind != UPDATE:
            self._complete(m.result, "master")
            return
        cur.reply = m
        self._evaluate()
        if self._is_current(m.op_id, m.attempt) and cur.reply is not None:
            # Give witness replies sent in the same round a chance to land.
            self.after(0, lambda: self._check_slow_path(m.op_id, m.attempt))

    def on_RecordReply(self, src: NodeId, m: RecordReply) -> None:
        if not self._is_current(m.op_id, m.attempt):
            return
        (self.current.accepted if m.accepted else self.current.rejected).add(src)
        self._evaluate()

    def _evaluate(self) -> None:
        cur = self.current
        reply = cur.reply
        if reply is None:
            return
        if reply.synced:
            self._complete(reply.result, "synced")
        elif len(cur.accepted) == len(cur.config.witnesses):
            self._complete(reply.result, "witnesses")
        elif cur.rejected:
            self._send_sync()

    def _check_slow_path(self, op_id: int, attempt: int) -> None:
        if self._is_current(op_id, attempt):
            self._send_sync()

    def _send_sync(self) -> None:
        cur = self.current
        if cur.sync_sent:
            return
        cur.sync_sent = True
        self.sync_rpcs += 1
        self.event("sync_rpc", client=self.client_id, op_id=cur.op_id, rpc=cur.rpc_id.to_json())
        self.send(cur.config.master, SyncRpc(cur.op_id, cur.attempt, cur.rpc_id))

    def on_SyncRpcReply(self, src: NodeId, m: SyncRpcReply) -> None:
        if not self._is_current(m.op_id, m.attempt):
            return
        if m.ok:
            self._complete(self.current.reply.result, "sync_rpc")
        else:
            self._refresh()  # restart the whole operation

    # -- reads from a backup ------------------------------------------------------

    def on_CommuteCheckReply(self, src: NodeId, m: CommuteCheckReply) -> None:
        if not self._is_current(m.op_id, m.attempt) or self.current.stage != "check":
            return
        cur = self.current
        if m.commutes and cur.config.backups:
            cur.stage = "backup"
            self.send(cur.config.backups[0], ReadBackup(cur.op_id, cur.attempt, cur.op.keys[0]))
        else:
            self._read_master()

    def on_ReadBackupReply(self, src: NodeId, m: ReadBackupReply) -> None:
        if not self._is_current(m.op_id, m.attempt) or self.current.stage != "backup":
            return
        self._complete(Result((m.value,)), "backup")
