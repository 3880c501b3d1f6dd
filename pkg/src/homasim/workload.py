"""Open-loop traffic: CDF-driven sizes, Poisson arrivals, uniform destinations."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .fabric import WireModel
from .priority_alloc import SizeDistribution, load_cdf
from .sim_core import NS_PER_S, make_rng

MODES = ("oneway", "rpc")
PACKAGED = ("w1", "w2", "w3", "w4", "w5")


def packaged_cdf(name: str) -> SizeDistribution:
    """One of the bundled ``w1``..``w5`` approximations."""
    key = name.lower()
    if key.startswith("approx-"):
        key = key[len("approx-"):]
    if key not in PACKAGED:
        raise KeyError(f"no packaged workload named {name!r}; choose from {', '.join(PACKAGED)}")
    with resources.as_file(resources.files("homasim") / "data" / f"{key}.cdf") as path:
        dist = load_cdf(path)
    return SizeDistribution(dist.sizes, dist.cumulative, f"approx-{key.upper()}")


def resolve_cdf(ref: str) -> SizeDistribution:
    """A packaged name (``w3``) or a path to a CDF file."""
    if ref.lower().removeprefix("approx-") in PACKAGED:
        return packaged_cdf(ref)
    return load_cdf(Path(ref))


@dataclass(frozen=True)
class WorkloadSpec:
    cdf: SizeDistribution
    target_load: float
    mode: str = "oneway"
    duration_ns: int = 10_000_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_load < 1.0:
            raise ValueError("target_load must be within [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.duration_ns <= 0:
            raise ValueError("duration_ns must be > 0")


def message_packets(size: int, unsched_limit: int, wire: WireModel) -> tuple[int, int]:
    """(unscheduled, scheduled) DATA packet counts for a message on an idle path."""
    maxp = wire.max_payload
    u = min(size, unsched_limit)
    unsched = -(-u // maxp) if u else 1
    sched = -(-(size - u) // maxp)
    return unsched, sched


def goodput_bytes(size: int, unsched_limit: int, wire: WireModel) -> int:
    """Wire bytes one message contributes to load: payload, headers and one GRANT per
    scheduled packet."""
    unsched, sched = message_packets(size, unsched_limit, wire)
    return size + (unsched + sched) * wire.per_packet_overhead + sched * wire.control_packet


def mean_goodput_bytes(dist: SizeDistribution, unsched_limit: int, wire: WireModel) -> float:
    return sum(p * goodput_bytes(s, unsched_limit, wire)
               for s, p in zip(dist.sizes, dist.probabilities))


def calibrate_rate(spec: WorkloadSpec, wire: WireModel, host_bps: int,
                   unsched_limit: int) -> float:
    """Per-sender Poisson rate (messages per second) that offers ``target_load``."""
    if spec.target_load == 0:
        return 0.0
    return spec.target_load * host_bps / (8 * mean_goodput_bytes(spec.cdf, unsched_limit, wire))


class MessageSource:
    """Poisson arrivals for one sender.

    Each arrival draws, in order, the gap, the size and the destination from
    the host's own stream, so two configurations with the same seed and rate
    see the same offered traffic.
    """

    def __init__(self, host: int, num_hosts: int, dist: SizeDistribution, rate_per_s: float,
                 rng: random.Random):
        if num_hosts < 2:
            raise ValueError("need at least two hosts")
        self.host = host
        self.num_hosts = num_hosts
        self.dist = dist
        self.rate = rate_per_s
        self.rng = rng
        self.clock = 0

    def next_message(self) -> tuple[int, int, int] | None:
        """(size, destination, issue_time_ns), or None when the rate is zero."""
        if self.rate <= 0:
            return None
        rng = self.rng
        gap = rng.expovariate(self.rate) * NS_PER_S
        self.clock += max(1, math.ceil(gap))
        size = self.dist.quantile(rng.random())
        dst = rng.randrange(self.num_hosts - 1)
        if dst >= self.host:
            dst += 1
        return size, dst, self.clock


def make_sources(spec: WorkloadSpec, num_hosts: int, rate_per_s: float) -> list[MessageSource]:
    return [MessageSource(h, num_hosts, spec.cdf, rate_per_s,
                          make_rng(spec.seed, f"workload/{h}")) for h in range(num_hosts)]


def rpc_mode_issue(client: int, servers: list[int], fanout: int, request_size: int,
                   response_size: int) -> list[tuple[int, int, int]]:
    """Fanout-many (server, request_size, response_size) triples, servers round-robin."""
    pool = [s for s in servers if s != client]
    if not pool:
        raise ValueError("no servers other than the client")
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    return [(pool[i % len(pool)], request_size, response_size) for i in range(fanout)]


def payload_for(rpc_id: int, length: int, response: bool = False) -> bytes:
    """Deterministic message contents, reproducible from the id alone."""
    return random.Random(rpc_id * 2 + int(response)).randbytes(length)
