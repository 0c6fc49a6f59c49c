from __future__ import annotations

import pytest

from curpsim.sim import Node, NodeId, Role, Simulator


class Probe(Node):
    """A node that records every payload it receives."""

    def __init__(self, node_id: NodeId):
        super().__init__(node_id)
        self.inbox: list = []

    def deliver(self, msg) -> None:
        self.inbox.append((self.sim.now, msg.src, msg.payload))

    def of(self, cls) -> list:
        return [p for _, _, p in self.inbox if isinstance(p, cls)]


@pytest.fixture
def sim() -> Simulator:
    return Simulator(seed=1)


@pytest.fixture
def probe(sim) -> Probe:
    return sim.add(Probe(NodeId(Role.CLIENT, 99)))
