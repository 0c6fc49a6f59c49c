"""Object store used by masters, backups and the history checker.

Objects are tagged with the log position of their last update so that a
master can tell synced objects from unsynced ones by comparing against its
last synced position.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

MAX_KEY_BYTES = 255

Value = Union[str, int]

TYPE_ERROR = "TypeError"


def key_hash(key: Union[str, bytes]) -> int:
    """64-bit FNV-1a hash of a primary key."""
    data = key.encode() if isinstance(key, str) else key
    h = FNV_OFFSET_BASIS
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def check_key(key: str) -> None:
    n = len(key.encode())
    if not 1 <= n <= MAX_KEY_BYTES:
        raise ValueError(f"key must be 1..{MAX_KEY_BYTES} bytes, got {n}")


class OpKind(str, enum.Enum):
    GET = "get"
    SET = "set"
    DEL = "del"
    INCREMENT = "incr"


@dataclass(frozen=True)
class KvOp:
    kind: OpKind
    keys: tuple[str, ...]
    value: Optional[str] = None  # SET payload, written to every key
    delta: int = 0  # INCREMENT payload

    def __post_init__(self) -> None:
        if not self.keys:
            raise ValueError("an operation touches at least one key")
        for k in self.keys:
            check_key(k)
        if self.kind is OpKind.SET and self.value is None:
            raise ValueError("SET needs a value")

    @property
    def is_update(self) -> bool:
        return self.kind is not OpKind.GET

    @property
    def key_hashes(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(key_hash(k) for k in self.keys))

    def to_json(self) -> dict:
        d: dict = {"kind": self.kind.value, "keys": list(self.keys)}
        if self.kind is OpKind.SET:
            d["value"] = self.value
        if self.kind is OpKind.INCREMENT:
            d["delta"] = self.delta
        return d

    @classmethod
    def from_json(cls, d: dict) -> "KvOp":
        return cls(OpKind(d["kind"]), tuple(d["keys"]), d.get("value"), d.get("delta", 0))

    def __str__(self) -> str:
        keys = ",".join(self.keys)
        if self.kind is OpKind.SET:
            return f"set({keys}={self.value})"
        if self.kind is OpKind.INCREMENT:
            return f"incr({keys}{self.delta:+d})"
        return f"{self.kind.value}({keys})"


def get(*keys: str) -> KvOp:
    return KvOp(OpKind.GET, keys)


def put(value: str, *keys: str) -> KvOp:
    return KvOp(OpKind.SET, keys, value=value)


def delete(*keys: str) -> KvOp:
    return KvOp(OpKind.DEL, keys)


def incr(key: str, delta: int = 1) -> KvOp:
    return KvOp(OpKind.INCREMENT, (key,), delta=delta)


@dataclass(frozen=True)
class Result:
    """Outcome of one operation.

    ``values`` holds one entry per key: the current value for GET, the
    previous value for SET/DEL and the new value for INCREMENT.  ``None``
    stands for NotFound.
    """

    values: tuple[Optional[Value], ...] = ()
    error: Optional[str] = None

    def to_json(self) -> dict:
        d: dict = {"values": list(self.values)}
        if self.error:
            d["error"] = self.error
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Result":
        return cls(tuple(d["values"]), d.get("error"))


@dataclass
class KvObject:
    value: Optional[Value]  # None is a tombstone left by DEL
    last_update: int


@dataclass
class KvState:
    objects: dict[str, KvObject] = field(default_factory=dict)
    head: int = 0

    def copy(self) -> "KvState":
        return KvState({k: KvObject(o.value, o.last_update) for k, o in self.objects.items()}, self.head)

    def value(self, key: str) -> Optional[Value]:
        obj = self.objects.get(key)
        return None if obj is None else obj.value

    def last_update(self, key: str) -> int:
        obj = self.objects.get(key)
        return 0 if obj is None else obj.last_update

    def snapshot(self) -> dict[str, Value]:
        """Live values, tombstones dropped."""
        return {k: o.value for k, o in self.objects.items() if o.value is not None}

    def apply(self, op: KvOp, pos: int) -> Result:
        """Execute ``op`` in place at log position ``pos``."""
        if op.kind is OpKind.GET:
            return Result(tuple(self.value(k) for k in op.keys))
        if pos <= self.head:
            raise ValueError(f"update position {pos} not past head {self.head}")
        self.head = pos
        old = tuple(self.value(k) for k in op.keys)
        if op.kind is OpKind.INCREMENT:
            if any(v is not None and not isinstance(v, int) for v in old):
                # Failed increments still stamp their keys: the outcome
                # depended on their values.
                for k in op.keys:
                    self.objects[k] = KvObject(self.value(k), pos)
                return Result(old, TYPE_ERROR)
            new = tuple((v or 0) + op.delta for v in old)
            for k, v in zip(op.keys, new):
                self.objects[k] = KvObject(v, pos)
            return Result(new)
        write = op.value if op.kind is OpKind.SET else None
        for k in op.keys:
            self.objects[k] = KvObject(write, pos)
        return Result(old)

    def advance(self, pos: int) -> None:
        """Consume a log position that changes no object."""
        if pos <= self.head:
            raise ValueError(f"position {pos} not past head {self.head}")
        self.head = pos

    def install(self, values: dict[str, Value], pos: int) -> None:
        """Load migrated objects as one logged update at ``pos``."""
        if pos <= self.head:
            raise ValueError(f"install position {pos} not past head {self.head}")
        self.head = pos
        for k, v in values.items():
            self.objects[k] = KvObject(v, pos)


def execute(state: KvState, op: KvOp, pos: int) -> tuple[KvState, Result]:
    """Pure form of :meth:`KvState.apply`."""
    new = state.copy()
    return new, new.apply(op, pos)


def is_unsynced(state: KvState, keys: Iterable[str], sync_point: int) -> bool:
    return any(state.last_update(k) > sync_point for k in keys)
