"""Key choosers and operation streams for simulated clients."""

from __future__ import annotations

import itertools
import random
from typing import Iterator, Optional

from curpsim import kv
from curpsim.client import READ, READ_BACKUP, UPDATE
from curpsim.kv import KvOp


class Uniform:
    def __init__(self, n: int, rng: random.Random):
        self.n, self.rng = n, rng

    def next(self) -> int:
        return self.rng.randrange(self.n)


class Zipfian:
    """YCSB's zipfian generator (Gray et al.), item 0 being the hottest.

    ``zetan`` can be passed in to share the O(n) constant between clients.
    """

    def __init__(self, n: int, theta: float, rng: random.Random, zetan: Optional[float] = None):
        if not 0 < theta <= 1:
            raise ValueError("theta must be in (0, 1]")
        if theta == 1:
            theta = 0.9999999  # the closed form divides by 1 - theta
        self.n, self.theta, self.rng = n, theta, rng
        self.zetan = zeta(n, theta) if zetan is None else zetan
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - zeta(2, theta) / self.zetan)

    def next(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self.theta:
            return 1
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))


def zeta(n: int, theta: float) -> float:
    return sum(1.0 / (i ** theta) for i in range(1, n + 1))


def key_name(i: int) -> str:
    return f"user{i}"


def mixed(chooser, rng: random.Random, *, write_fraction: float, backup_read_fraction: float = 0.0,
          incr_fraction: float = 0.0, counter_keys: int = 0, tag: str = "") -> Iterator[tuple[str, KvOp]]:
    """Endless stream of updates and reads.

    Reads go to the master unless drawn as backup reads.  Updates are SETs
    of unique values, or increments of one of ``counter_keys`` counters.
    """
    for n in itertools.count():
        if rng.random() < write_fraction:
            if counter_keys and rng.random() < incr_fraction:
                yield UPDATE, kv.incr(f"ctr{rng.randrange(counter_keys)}")
            else:
                yield UPDATE, kv.put(f"{tag}v{n}", key_name(chooser.next()))
        else:
            kind = READ_BACKUP if rng.random() < backup_read_fraction else READ
            yield kind, kv.get(key_name(chooser.next()))


def distinct_writes(tag: str) -> Iterator[tuple[str, KvOp]]:
    """Writes that never touch the same key twice."""
    for n in itertools.count():
        yield UPDATE, kv.put(f"v{n}", f"{tag}-{n}")


def same_key_writes(key: str, tag: str = "") -> Iterator[tuple[str, KvOp]]:
    for n in itertools.count():
        yield UPDATE, kv.put(f"{tag}v{n}", key)


def scripted(ops) -> Iterator[tuple[str, KvOp]]:
    return iter(list(ops))
