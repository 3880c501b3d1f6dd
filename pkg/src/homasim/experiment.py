"""Wiring of engine, fabric, transports and workload into runnable experiments."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from .fabric import Fabric, Packet, Topology, WireModel
from .metrics import (Collector, CompletionRecord, WasteTracker, priority_usage, slowdown_spectrum,
                      tail_delay_breakdown, wasted_fraction, write_breakdown, write_completions,
                      write_ports, write_priousage, write_spectrum, write_waste)
from .priority_alloc import PriorityAllocation, SizeDistribution
from .protocol import ONEWAY, REQUEST, RESPONSE, UNLIMITED, HomaTransport, TransportConfig
from .sim_core import NS_PER_MS, Simulator
from .workload import (WorkloadSpec, calibrate_rate, goodput_bytes, make_sources, payload_for,
                       resolve_cdf)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    topology: Topology = field(default_factory=Topology)
    wire: WireModel = field(default_factory=WireModel)
    transport: TransportConfig = field(default_factory=TransportConfig)
    workload: str = "w3"
    load: float = 0.5
    mode: str = "oneway"
    duration_ns: int = 10 * NS_PER_MS
    drain_ns: int = 0
    warmup_fraction: float = 0.1
    seed: int = 1
    network_priorities: int = 8
    # None lets the safety cap scale with the topology.
    max_pending: int | None = None
    samples: int = 40

    def __post_init__(self):
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be within [0, 1)")
        if self.drain_ns < 0:
            raise ValueError("drain_ns must be >= 0")
        if self.samples < 2:
            raise ValueError("samples must be >= 2")

    @property
    def rtt_bytes(self) -> int:
        if self.transport.rtt_bytes is not None:
            return self.transport.rtt_bytes
        return self.topology.rtt_bytes(self.wire)

    @property
    def resolved_transport(self) -> TransportConfig:
        return self.transport.resolved(self.topology.rtt_bytes(self.wire))

    @property
    def warmup_ns(self) -> int:
        return int(self.duration_ns * self.warmup_fraction)


class Cluster:
    """Simulator, fabric and one transport per host."""

    def __init__(self, topology: Topology, wire: WireModel, transport: TransportConfig,
                 alloc: PriorityAllocation, seed: int = 1, network_priorities: int = 8,
                 max_pending: int | None = None, rpc_mode: bool = False, waste_from: int = 0):
        self.sim = sim = Simulator(max_pending=max_pending)
        self.topology = topology
        self.wire = wire
        self.config = transport = transport.resolved(topology.rtt_bytes(wire))
        self.alloc = alloc
        self.fabric = fabric = Fabric(sim, topology, wire, seed, network_priorities)
        self.collector = Collector()
        self.rpc_mode = rpc_mode
        self.request_sizes: dict[int, int] = {}
        self.response_sizes: dict[int, int] = {}
        self.executions: dict[int, int] = {}
        self.payload_checked = 0
        self.payload_mismatches = 0
        self.offered_bytes = 0
        self.transports: list[HomaTransport] = []
        self.waste = [WasteTracker(waste_from) for _ in range(topology.num_hosts)]
        clock = self._clock
        for h in range(topology.num_hosts):
            t = HomaTransport(h, transport, alloc, wire, clock, self._transmitter(h),
                              self._timer_for(h))
            t.rpc_mode = rpc_mode
            t.on_message = self._on_message
            t.on_abort = self._on_abort
            t.on_retransmit = self._on_retransmit
            t.on_sched_pressure = self.waste[h].pressure
            fabric.tor_down[h].idle_listener = self.waste[h].link
            fabric.attach(h, t)
            self.transports.append(t)

    def _clock(self) -> int:
        return self.sim.now

    def _transmitter(self, host: int):
        send = self.fabric.send_from_host

        def transmit(pkt: Packet) -> None:
            send(host, pkt)
        return transmit

    def _timer_for(self, host: int):
        sim = self.sim

        def arm(delay: int) -> None:
            sim.schedule(sim.now + delay, self.transports[host].check_timeouts)
        return arm

    # -------------------------------------------------------------- traffic

    def send_oneway(self, src: int, dst: int, size: int) -> int:
        t = self.transports[src]
        rpc_id = t.new_rpc_id()
        self.collector.submitted(rpc_id, size, self.sim.now, src, dst,
                                 self.topology.same_rack(src, dst))
        self.offered_bytes += goodput_bytes(size, self.config.effective_unsched_limit, self.wire)
        payload = payload_for(rpc_id, size) if self.config.carry_payload else None
        t.send_message(dst, size, payload, rpc_id=rpc_id)
        return rpc_id

    def send_rpc(self, client: int, server: int, request_size: int,
                 response_size: int | None = None) -> int:
        t = self.transports[client]
        rpc_id = t.new_rpc_id()
        if response_size is None:
            response_size = request_size
        self.request_sizes[rpc_id] = request_size
        self.response_sizes[rpc_id] = response_size
        self.collector.submitted(rpc_id, response_size, self.sim.now, client, server,
                                 self.topology.same_rack(client, server))
        limit = self.config.effective_unsched_limit
        self.offered_bytes += (goodput_bytes(request_size, limit, self.wire)
                               + goodput_bytes(response_size, limit, self.wire))
        payload = payload_for(rpc_id, request_size) if self.config.carry_payload else None
        t.send_request(server, request_size, response_size, payload, rpc_id=rpc_id)
        return rpc_id

    def _on_message(self, host: int, kind: str, msg, payload: bytes | None, pkt: Packet) -> None:
        now = self.sim.now
        if payload is not None:
            self.payload_checked += 1
            if payload != self.expected_payload(kind, msg.rpc_id, msg.length):
                self.payload_mismatches += 1
        if kind == REQUEST:
            self.executions[msg.rpc_id] = self.executions.get(msg.rpc_id, 0) + 1
            size = self.response_sizes.get(msg.rpc_id, msg.length)
            body = None
            if self.config.carry_payload:
                body = payload if size == msg.length else payload_for(msg.rpc_id, size, True)
            self.transports[host].send_response(msg.rpc_id, msg.src, size, msg.incast_flag, body)
            return
        rec = self.collector.finished(msg.rpc_id, now)
        if rec is None:
            return
        if (msg.length <= self.wire.max_payload and pkt.offset == 0
                and pkt.length == msg.length and not pkt.retransmit and rec.retx_bytes == 0
                and kind == ONEWAY):
            rec.lag_ns = pkt.lag_ns
            rec.queue_ns = pkt.queue_ns
            rec.sender_wait_ns = pkt.sent_at - rec.submit_ns

    def expected_payload(self, kind: str, rpc_id: int, length: int) -> bytes:
        # Responses echo the request when sizes match; otherwise the server
        # generates its own deterministic bytes.
        if kind == RESPONSE and self.request_sizes.get(rpc_id) != length:
            return payload_for(rpc_id, length, response=True)
        return payload_for(rpc_id, length)

    def _on_abort(self, host: int, kind: str, rpc_id: int) -> None:
        self.collector.aborted(rpc_id)

    def _on_retransmit(self, rpc_id: int, is_response: bool, nbytes: int) -> None:
        self.collector.retransmitted(rpc_id, nbytes)

    # -------------------------------------------------------------- queries

    def violations(self) -> int:
        return sum(t.stats.violations for t in self.transports)

    def violation_log(self) -> list[str]:
        out = []
        for t in self.transports:
            out.extend(t.stats.violation_log)
        return out

    def drops(self) -> int:
        return self.fabric.overflow_drops

    def idle(self) -> bool:
        return all(not t._in and not t._rpcs and not t._ready and not t._ctrl
                   for t in self.transports)


class BestCaseOracle:
    """Unloaded completion time, measured by simulating the message alone.

    Results are cached per (size, same_rack). The oracle fabric keeps every
    timing parameter of the real topology but only three hosts.
    """

    def __init__(self, topology: Topology, wire: WireModel, transport: TransportConfig,
                 alloc: PriorityAllocation, rpc: bool = False):
        self.topology = replace(topology, num_racks=2, hosts_per_rack=2, num_aggr_switches=1,
                                loss_rate=0.0)
        self.rtt_bytes = topology.rtt_bytes(wire)
        self.wire = wire
        self.transport = replace(transport.resolved(self.rtt_bytes), audit=False,
                                 carry_payload=False)
        self.alloc = alloc
        self.rpc = rpc
        self._cache: dict[tuple[int, bool], int] = {}

    def __call__(self, size: int, same_rack: bool = False) -> int:
        key = (size, bool(same_rack))
        t = self._cache.get(key)
        if t is None:
            t = self._cache[key] = self._measure(size, bool(same_rack))
        return t

    def _measure(self, size: int, same_rack: bool) -> int:
        cl = Cluster(self.topology, self.wire, self.transport, self.alloc, rpc_mode=self.rpc)
        dst = 1 if same_rack else 2
        rpc_id = cl.send_rpc(0, dst, size) if self.rpc else cl.send_oneway(0, dst, size)
        cl.sim.run()
        rec = cl.collector.records[rpc_id]
        if not rec.completed:
            raise RuntimeError(f"oracle run for size {size} did not complete")
        return rec.latency_ns


def best_case_time(size: int, topology: Topology | None = None, wire: WireModel | None = None,
                   transport: TransportConfig | None = None, dist: SizeDistribution | None = None,
                   same_rack: bool = False) -> int:
    """Unloaded one-way completion time of a ``size``-byte message."""
    topology = topology or Topology()
    wire = wire or WireModel()
    transport = (transport or TransportConfig()).resolved(topology.rtt_bytes(wire))
    dist = dist or SizeDistribution.single(size)
    return BestCaseOracle(topology, wire, transport, transport.allocation(dist))(size, same_rack)


@dataclass
class LoadSample:
    t_ns: int
    offered_bytes: int
    delivered_bytes: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dist: SizeDistribution
    alloc: PriorityAllocation
    overcommit: int
    rate_per_host: float
    records: list[CompletionRecord]
    samples: list[LoadSample]
    port_reports: list
    level_summary: dict
    waste: float
    prio_bytes: list[int]
    prio_fraction: list[float]
    drops: int
    loss_drops: int
    violations: int
    violation_log: list[str]
    truncated: bool
    dispatched: int
    oracle: BestCaseOracle
    end_ns: int = 0
    payload_checked: int = 0
    payload_mismatches: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def warmup_ns(self) -> int:
        return self.config.warmup_ns

    @property
    def span_ns(self) -> int:
        return self.config.duration_ns - self.config.warmup_ns

    def _at(self, t: int) -> LoadSample:
        best = self.samples[0]
        for s in self.samples:
            if s.t_ns <= t:
                best = s
        return best

    @property
    def offered_load(self) -> float:
        return self._window_load("offered_bytes")

    @property
    def delivered_load(self) -> float:
        return self._window_load("delivered_bytes")

    def _window_load(self, attr: str) -> float:
        cfg = self.config
        a = self._at(cfg.warmup_ns)
        b = self._at(cfg.duration_ns)
        topo = cfg.topology
        span = b.t_ns - a.t_ns
        if span <= 0:
            return 0.0
        cap = topo.num_hosts * topo.host_bps / 8 * span / 1e9
        return (getattr(b, attr) - getattr(a, attr)) / cap

    def backlog_growth(self) -> float:
        """Trend of undelivered bytes after the warm-up, as a fraction of the
        bytes offered over the same window.

        The trend is a least-squares slope over every sample in the window, so
        a single multi-megabyte message arriving or finishing near either end
        does not dominate it.
        """
        cfg = self.config
        window = [s for s in self.samples if cfg.warmup_ns <= s.t_ns <= cfg.duration_ns]
        if len(window) < 2:
            return 0.0
        span = window[-1].t_ns - window[0].t_ns
        offered = window[-1].offered_bytes - window[0].offered_bytes
        if span <= 0 or offered <= 0:
            return 0.0
        xs = [s.t_ns for s in window]
        ys = [s.offered_bytes - s.delivered_bytes for s in window]
        slope = statistics.linear_regression(xs, ys).slope
        return slope * span / offered

    def goodput_ratio(self) -> float:
        """Delivered over offered goodput rate after the warm-up, from the backlog trend."""
        return 1.0 - self.backlog_growth()

    def median_delay(self, lo_ns: int, hi_ns: int) -> float | None:
        """Median queueing delay of messages submitted in ``[lo_ns, hi_ns)``.

        Queueing delay is completion time minus the unloaded time. A message
        still unfinished when the run stopped counts with its age at that
        point, which is a lower bound.
        """
        vals = []
        for r in self.records:
            if not lo_ns <= r.submit_ns < hi_ns or r.aborted:
                continue
            done = r.finish_ns if r.finish_ns >= 0 else self.end_ns
            vals.append(done - r.submit_ns - self.oracle(r.size, r.same_rack))
        if not vals:
            return None
        return statistics.median(vals)

    def delay_stationary(self, rel_tol: float = 0.25, abs_tol_ns: int = 1_000) -> bool:
        """Median queueing delay of the last quarter is no worse than the third."""
        d = self.config.duration_ns
        q3 = self.median_delay(d // 2, 3 * d // 4)
        q4 = self.median_delay(3 * d // 4, d)
        if q3 is None or q4 is None:
            return True
        return q4 <= max(q3, 0) * (1 + rel_tol) + abs_tol_ns

    def sustainable(self, tolerance: float = 0.02) -> bool:
        """Delivered goodput tracks the offered load and delay is not drifting upward."""
        if self.truncated:
            return False
        if self.offered_load <= 0:
            return True
        return self.goodput_ratio() >= 1 - tolerance and self.delay_stationary()

    def completed(self) -> list[CompletionRecord]:
        return [r for r in self.records if r.completed]

    def aborted(self) -> list[CompletionRecord]:
        return [r for r in self.records if r.aborted]

    def spectrum(self):
        return slowdown_spectrum(self.records, self.dist, self.oracle, self.warmup_ns)

    def breakdown(self):
        return tail_delay_breakdown(self.records, self.dist, self.oracle, self.warmup_ns)

    def write_outputs(self, out_dir: Path, spectrum: bool = True) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []

        def p(name):
            paths.append(out_dir / name)
            return paths[-1]

        write_completions(p("completions.csv"), self.records)
        buckets = []
        if spectrum and any(r.completed and r.submit_ns >= self.warmup_ns for r in self.records):
            buckets = self.spectrum()
        write_spectrum(p("spectrum.csv"), buckets)
        write_ports(p("ports.csv"), self.port_reports)
        k = "unlimited" if self.overcommit >= UNLIMITED else str(self.overcommit)
        write_waste(p("waste.csv"), [(self.config.load, k, self.waste)])
        write_priousage(p("priousage.csv"), self.prio_bytes, self.prio_fraction)
        write_breakdown(p("breakdown.csv"), self.breakdown())
        return paths


def run_experiment(cfg: ExperimentConfig, dist: SizeDistribution | None = None) -> ExperimentResult:
    """Open-loop run: Poisson arrivals at every host until ``duration_ns``, then drain."""
    dist = dist or resolve_cdf(cfg.workload)
    topo = cfg.topology
    transport = cfg.resolved_transport
    alloc = transport.allocation(dist)
    rpc = cfg.mode == "rpc"
    cap = cfg.max_pending if cfg.max_pending is not None else 200_000 + 2_000 * topo.num_hosts
    cl = Cluster(topo, cfg.wire, transport, alloc, cfg.seed, cfg.network_priorities, cap,
                 rpc_mode=rpc, waste_from=cfg.warmup_ns)
    sim = cl.sim
    spec = WorkloadSpec(dist, cfg.load, cfg.mode, cfg.duration_ns, cfg.seed)
    unsched = transport.effective_unsched_limit
    rate = calibrate_rate(spec, cfg.wire, topo.host_bps, unsched)
    if rpc:
        # Each RPC moves the block twice.
        rate /= 2
    sources = make_sources(spec, topo.num_hosts, rate)
    end = cfg.duration_ns

    def arrive(src, size, dst):
        if rpc:
            cl.send_rpc(src.host, dst, size)
        else:
            cl.send_oneway(src.host, dst, size)
        nxt = src.next_message()
        if nxt is not None and nxt[2] < end:
            sim.schedule(nxt[2], arrive, src, nxt[0], nxt[1])

    for src in sources:
        first = src.next_message()
        if first is not None and first[2] < end:
            sim.schedule(first[2], arrive, src, first[0], first[1])

    samples: list[LoadSample] = []
    fabric = cl.fabric

    def sample():
        samples.append(LoadSample(sim.now, cl.offered_bytes, fabric.goodput_bytes))

    prio_start: list[int] = [0] * 8

    def snapshot():
        for lvl in range(8):
            prio_start[lvl] = sum(p.tx_bytes_by_prio[lvl] for p in fabric.tor_down)

    times = sorted({cfg.warmup_ns, end} | {end * i // cfg.samples for i in range(cfg.samples + 1)})
    for t in times:
        sim.schedule(t, sample)
    sim.schedule(cfg.warmup_ns, snapshot)
    summary = sim.run_until(end)
    prio_end = [sum(p.tx_bytes_by_prio[lvl] for p in fabric.tor_down) for lvl in range(8)]
    waste = wasted_fraction(cl.waste, cfg.warmup_ns, end)
    if summary.truncated:
        log.warning("run truncated at t=%d ns: %d pending events exceed the safety cap",
                    summary.clock, summary.pending)
    elif cfg.drain_ns:
        sim.run_until(end + cfg.drain_ns)
    prio_bytes = [b - a for a, b in zip(prio_start, prio_end)]
    oracle = BestCaseOracle(topo, cfg.wire, transport, alloc, rpc=rpc)
    stats = {}
    for t in cl.transports:
        for k, v in vars(t.stats).items():
            if isinstance(v, int):
                stats[k] = stats.get(k, 0) + v
    return ExperimentResult(
        config=cfg, dist=dist, alloc=alloc, overcommit=cl.transports[0].K, rate_per_host=rate,
        records=cl.collector.ordered(), samples=samples,
        port_reports=[p.report(min(sim.now, end)) for p in fabric.switch_ports()],
        level_summary=fabric.level_summary(), waste=waste, prio_bytes=prio_bytes,
        prio_fraction=priority_usage(prio_bytes, topo.num_hosts, topo.host_bps,
                                     end - cfg.warmup_ns),
        drops=fabric.overflow_drops, loss_drops=fabric.loss_drops, violations=cl.violations(),
        violation_log=cl.violation_log(), truncated=summary.truncated,
        dispatched=sim.dispatched, oracle=oracle, end_ns=sim.now,
        payload_checked=cl.payload_checked,
        payload_mismatches=cl.payload_mismatches, stats=stats)


@dataclass
class IncastResult:
    fanout: int
    drops: int
    completed: int
    aborted: int
    flagged_requests: int
    flagged_unsched_bytes: int
    max_tor_down_bytes: int
    finish_ns: int


def run_incast(topology: Topology, wire: WireModel, transport: TransportConfig, fanout: int,
               request_size: int = 100, response_size: int = 10_000, client: int = 0,
               seed: int = 1, limit_ns: int = 200 * NS_PER_MS) -> IncastResult:
    """One client issues ``fanout`` concurrent RPCs spread round-robin over all other hosts."""
    from .workload import rpc_mode_issue
    transport = transport.resolved(topology.rtt_bytes(wire))
    dist = SizeDistribution.from_weights({request_size: 1, response_size: 1})
    alloc = transport.allocation(dist)
    cl = Cluster(topology, wire, transport, alloc, seed, rpc_mode=True)
    servers = list(range(topology.num_hosts))
    for server, req, resp in rpc_mode_issue(client, servers, fanout, request_size, response_size):
        cl.send_rpc(client, server, req, resp)
    cl.sim.run_until(limit_ns)
    recs = cl.collector.ordered()
    t = cl.transports
    return IncastResult(
        fanout=fanout, drops=cl.drops(), completed=sum(r.completed for r in recs),
        aborted=sum(r.aborted for r in recs),
        flagged_requests=sum(x.stats.flagged_requests for x in t),
        flagged_unsched_bytes=sum(x.stats.flagged_unsched_bytes for x in t),
        max_tor_down_bytes=cl.fabric.tor_down[client].max_qbytes,
        finish_ns=max((r.finish_ns for r in recs), default=-1))
