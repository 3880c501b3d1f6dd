import pytest

from homasim.fabric import Topology, WireModel
from homasim.priority_alloc import SizeDistribution
from homasim.protocol import TransportConfig
from homasim.experiment import Cluster


DESK = Topology(num_racks=4, hosts_per_rack=4, num_aggr_switches=1)
SMALL = Topology(num_racks=2, hosts_per_rack=2, num_aggr_switches=1)


@pytest.fixture
def wire():
    return WireModel()


def make_cluster(topology=SMALL, dist=None, rpc=False, seed=1, network_priorities=8, **transport):
    """Cluster with an allocation computed from ``dist`` (default: two sizes)."""
    wire = WireModel()
    cfg = TransportConfig(**transport).resolved(topology.rtt_bytes(wire))
    dist = dist or SizeDistribution.from_weights({100: 1, 100_000: 1})
    return Cluster(topology, wire, cfg, cfg.allocation(dist), seed=seed,
                   network_priorities=network_priorities, rpc_mode=rpc)


def capture(cluster):
    """Record every packet sent by any host, as (time, packet)."""
    sent = []
    cluster.fabric.tracer = lambda ev, t, p: sent.append((t, p)) if ev == "send" else None
    return sent


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one acceptance line, then asserts ``ok``."""
    def record(n, ok, detail):
        _VERDICTS.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
