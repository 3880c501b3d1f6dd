"""Packet-level model of a two-tier datacenter fabric.

Hosts hang off top-of-rack (TOR) switches; every TOR has one uplink to each
aggregation switch. Every egress port serializes one packet at a time and
serves eight strict-priority FIFO queues that share one byte budget. Switches
are store-and-forward with a fixed internal delay and zero propagation delay.
Cross-rack packets are sprayed uniformly over the TOR uplinks.

Host NICs are modelled as single-queue FIFO ports; the transport above them
limits how much it hands to the NIC.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Callable, Protocol

from .sim_core import NS_PER_S, Simulator, make_rng

NUM_PRIORITIES = 8
HIGHEST_PRIORITY = NUM_PRIORITIES - 1


class PacketKind(enum.IntEnum):
    DATA = 0
    GRANT = 1
    RESEND = 2
    BUSY = 3


DATA = PacketKind.DATA
GRANT = PacketKind.GRANT
RESEND = PacketKind.RESEND
BUSY = PacketKind.BUSY


@dataclass(frozen=True)
class WireModel:
    max_payload: int = 1460
    # preamble+IFG 20, Ethernet header+CRC 18, IPv4 20, transport header 20
    per_packet_overhead: int = 78

    def __post_init__(self):
        if self.max_payload <= 0 or self.per_packet_overhead < 0:
            raise ValueError("max_payload must be > 0 and per_packet_overhead >= 0")

    def wire_bytes(self, payload: int) -> int:
        return self.per_packet_overhead + payload

    @property
    def full_packet(self) -> int:
        return self.per_packet_overhead + self.max_payload

    @property
    def control_packet(self) -> int:
        return self.per_packet_overhead


def serialization_ns(wire_bytes: int, bits_per_second: int) -> int:
    """Time to clock ``wire_bytes`` onto a link, rounded up to a whole nanosecond."""
    return -(-(wire_bytes * 8 * NS_PER_S) // bits_per_second)


@dataclass(frozen=True)
class Topology:
    num_racks: int = 9
    hosts_per_rack: int = 16
    num_aggr_switches: int = 4
    host_link_gbps: float = 10.0
    core_link_gbps: float = 40.0
    switch_delay_ns: int = 250
    sw_turnaround_ns: int = 1500
    buffer_limit_bytes: int = 512 * 1024
    loss_rate: float = 0.0

    def __post_init__(self):
        if min(self.num_racks, self.hosts_per_rack, self.num_aggr_switches) < 1:
            raise ValueError("topology counts must be >= 1")
        if self.host_link_gbps <= 0 or self.core_link_gbps <= 0:
            raise ValueError("link rates must be > 0")
        if self.switch_delay_ns < 0 or self.sw_turnaround_ns < 0:
            raise ValueError("delays must be >= 0")
        if self.buffer_limit_bytes <= 0:
            raise ValueError("buffer_limit_bytes must be > 0")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be within [0, 1]")

    @property
    def num_hosts(self) -> int:
        return self.num_racks * self.hosts_per_rack

    @property
    def host_bps(self) -> int:
        return round(self.host_link_gbps * 1e9)

    @property
    def core_bps(self) -> int:
        return round(self.core_link_gbps * 1e9)

    def rack_of(self, host: int) -> int:
        return host // self.hosts_per_rack

    def same_rack(self, a: int, b: int) -> bool:
        return a // self.hosts_per_rack == b // self.hosts_per_rack

    def path_serialization_ns(self, wire_bytes: int, same_rack: bool = False) -> int:
        host = 2 * serialization_ns(wire_bytes, self.host_bps)
        if same_rack:
            return host
        return host + 2 * serialization_ns(wire_bytes, self.core_bps)

    def path_switches(self, same_rack: bool = False) -> int:
        return 1 if same_rack else 3

    def one_way_ns(self, wire_bytes: int, same_rack: bool = False) -> int:
        """Unloaded latency of one packet, from NIC hand-off to software delivery."""
        return (self.path_serialization_ns(wire_bytes, same_rack)
                + self.path_switches(same_rack) * self.switch_delay_ns
                + self.sw_turnaround_ns)

    def grant_rtt_ns(self, wire: WireModel, same_rack: bool = False) -> int:
        """Full-size DATA arrival -> GRANT -> next full-size DATA arrival, processed."""
        return (self.one_way_ns(wire.control_packet, same_rack)
                + self.one_way_ns(wire.full_packet, same_rack))

    def rtt_bytes(self, wire: WireModel) -> int:
        """Bytes a host link carries during one cross-rack grant round trip."""
        return -(-self.grant_rtt_ns(wire) * self.host_bps // (8 * NS_PER_S))


class Packet:
    """One packet on the wire.

    ``offset`` is the start of the carried range for DATA, the grant limit
    for GRANT and the start of the missing range for RESEND. ``priority`` is
    the level the packet itself travels at; a GRANT names the level the
    sender must use for the granted bytes in ``grant_level``. ``length`` is
    the payload carried (DATA) or the requested range (RESEND).
    """

    __slots__ = (
        "kind", "src", "dst", "rpc_id", "is_response", "priority", "offset",
        "length", "message_length", "incast_flag", "unsched_bytes", "restart",
        "cutoffs", "wire_bytes", "retransmit", "payload", "grant_level",
        "sent_at", "lag_ns", "queue_ns", "_hop_arrival", "_hop_lag",
    )

    def __init__(self, kind: PacketKind, src: int, dst: int, rpc_id: int, wire_bytes: int, *,
                 is_response: bool = False, priority: int = HIGHEST_PRIORITY, offset: int = 0,
                 length: int = 0, message_length: int = 0, incast_flag: bool = False,
                 unsched_bytes: int = 0, restart: bool = False, cutoffs=None,
                 retransmit: bool = False, payload: bytes | None = None, grant_level: int = 0):
        self.kind = kind
        self.src = src
        self.dst = dst
        self.rpc_id = rpc_id
        self.is_response = is_response
        self.priority = priority
        self.offset = offset
        self.length = length
        self.message_length = message_length
        self.incast_flag = incast_flag
        self.unsched_bytes = unsched_bytes
        self.restart = restart
        self.cutoffs = cutoffs
        self.wire_bytes = wire_bytes
        self.retransmit = retransmit
        self.payload = payload
        self.grant_level = grant_level
        self.sent_at = 0
        self.lag_ns = 0
        self.queue_ns = 0
        self._hop_arrival = 0
        self._hop_lag = 0

    def __repr__(self):
        return (f"Packet({self.kind.name} rpc={self.rpc_id} {self.src}->{self.dst} "
                f"p{self.priority} off={self.offset} len={self.length})")


class Endpoint(Protocol):
    def receive(self, packet: Packet) -> None: ...

    def on_nic_tx_done(self, packet: Packet) -> None: ...


@dataclass
class PortReport:
    name: str
    level: str
    mean_bytes: float
    max_bytes: int
    drops: int
    tx_packets: int
    tx_bytes: int


class EgressPort:
    """Strict-priority output port (or a plain FIFO when ``fifo`` is set).

    Queue occupancy counts only packets waiting behind the one being
    serialized. Every packet's wait is split into preemption lag (the
    residual of a lower-priority packet already on the wire when it arrived)
    and queueing (everything else).
    """

    __slots__ = (
        "sim", "name", "level", "bps", "buffer_limit", "fifo", "queues", "qbytes",
        "busy", "current", "busy_until", "sink", "on_tx_done", "idle_listener",
        "queue_map", "drops", "dropped_bytes", "tx_packets", "tx_bytes",
        "tx_bytes_by_prio", "max_qbytes", "_area", "_last_change", "_ser_cache",
        "on_drop", "monitor",
    )

    def __init__(self, sim: Simulator, name: str, level: str, bps: int, buffer_limit: int,
                 fifo: bool = False, queue_map: list[int] | None = None):
        self.sim = sim
        self.name = name
        self.level = level
        self.bps = bps
        self.buffer_limit = buffer_limit
        self.fifo = fifo
        self.queues = [deque() for _ in range(1 if fifo else NUM_PRIORITIES)]
        self.queue_map = queue_map or list(range(NUM_PRIORITIES))
        self.qbytes = 0
        self.busy = False
        self.current: Packet | None = None
        self.busy_until = 0
        self.sink: Callable[[Packet], None] | None = None
        self.on_tx_done: Callable[[Packet], None] | None = None
        self.idle_listener: Callable[[int, bool], None] | None = None
        self.on_drop: Callable[[Packet], None] | None = None
        # Optional probe called as monitor(port, pkt) before every enqueue.
        self.monitor: Callable[[EgressPort, Packet], None] | None = None
        self.drops = 0
        self.dropped_bytes = 0
        self.tx_packets = 0
        self.tx_bytes = 0
        self.tx_bytes_by_prio = [0] * NUM_PRIORITIES
        self.max_qbytes = 0
        self._area = 0
        self._last_change = 0
        self._ser_cache: dict[int, int] = {}

    def ser_ns(self, wire_bytes: int) -> int:
        t = self._ser_cache.get(wire_bytes)
        if t is None:
            t = self._ser_cache[wire_bytes] = serialization_ns(wire_bytes, self.bps)
        return t

    def enqueue(self, pkt: Packet) -> None:
        now = self.sim.now
        if self.monitor is not None:
            self.monitor(self, pkt)
        if not self.busy:
            pkt._hop_arrival = now
            pkt._hop_lag = 0
            self._start(pkt, now)
            return
        w = pkt.wire_bytes
        if self.qbytes + w > self.buffer_limit:
            self.drops += 1
            self.dropped_bytes += w
            if self.on_drop is not None:
                self.on_drop(pkt)
            return
        pkt._hop_arrival = now
        cur = self.current
        # Only the residual of a lower-priority packet on the wire counts as lag.
        qm = self.queue_map
        pkt._hop_lag = self.busy_until - now if qm[cur.priority] < qm[pkt.priority] else 0
        self._area += self.qbytes * (now - self._last_change)
        self._last_change = now
        self.qbytes += w
        if self.qbytes > self.max_qbytes:
            self.max_qbytes = self.qbytes
        if self.fifo:
            self.queues[0].append(pkt)
        else:
            self.queues[self.queue_map[pkt.priority]].append(pkt)

    def _start(self, pkt: Packet, now: int) -> None:
        wait = now - pkt._hop_arrival
        if wait:
            lag = pkt._hop_lag
            pkt.lag_ns += lag
            pkt.queue_ns += wait - lag
        if not self.busy:
            self.busy = True
            if self.idle_listener is not None:
                self.idle_listener(now, False)
        self.current = pkt
        w = pkt.wire_bytes
        t = self._ser_cache.get(w)
        if t is None:
            t = self.ser_ns(w)
        self.busy_until = now + t
        self.tx_packets += 1
        self.tx_bytes += w
        self.tx_bytes_by_prio[pkt.priority] += w
        self.sim.schedule(self.busy_until, self._done)

    def _done(self) -> None:
        pkt = self.current
        self.current = None
        # Settle this port before callbacks, which may enqueue here again.
        if self.qbytes:
            now = self.sim.now
            queues = self.queues
            if self.fifo:
                nxt = queues[0].popleft()
            else:
                for q in range(len(queues) - 1, -1, -1):
                    if queues[q]:
                        nxt = queues[q].popleft()
                        break
            self._area += self.qbytes * (now - self._last_change)
            self._last_change = now
            self.qbytes -= nxt.wire_bytes
            self._start(nxt, now)
        else:
            self.busy = False
            if self.idle_listener is not None:
                self.idle_listener(self.sim.now, True)
        self.sink(pkt)
        if self.on_tx_done is not None:
            self.on_tx_done(pkt)

    def queued_packets(self) -> int:
        return sum(len(q) for q in self.queues)

    def report(self, now: int) -> PortReport:
        area = self._area + self.qbytes * (now - self._last_change)
        mean = area / now if now > 0 else 0.0
        return PortReport(self.name, self.level, mean, self.max_qbytes, self.drops,
                          self.tx_packets, self.tx_bytes)


class Fabric:
    """Hosts, TORs and aggregation switches wired per a :class:`Topology`.

    Port levels: ``host_up`` (NIC), ``tor_up`` (TOR->aggregation),
    ``aggr_down`` (aggregation->TOR) and ``tor_down`` (TOR->host).
    """

    def __init__(self, sim: Simulator, topology: Topology, wire: WireModel, seed: int = 0,
                 network_priorities: int = NUM_PRIORITIES):
        if not 1 <= network_priorities <= NUM_PRIORITIES:
            raise ValueError("network_priorities must be within 1..8")
        self.sim = sim
        self.topology = topology
        self.wire = wire
        self.loss_rate = topology.loss_rate
        self._spray_rng = make_rng(seed, "spray")
        self._loss_rng = make_rng(seed, "loss")
        # Collapse adjacent logical levels when the network offers fewer queues.
        queue_map = [p * network_priorities // NUM_PRIORITIES for p in range(NUM_PRIORITIES)]
        self.network_priorities = network_priorities
        self.endpoints: list[Endpoint | None] = [None] * topology.num_hosts
        self.injected_bytes = 0
        self.delivered_bytes = 0
        self.dropped_bytes = 0
        self.loss_drops = 0
        self.injected_packets = 0
        self.delivered_packets = 0
        self.goodput_bytes = 0
        self.tracer: Callable[[str, int, Packet], None] | None = None

        t = topology
        hb, cb, buf = t.host_bps, t.core_bps, t.buffer_limit_bytes
        self.host_up = [EgressPort(sim, f"host{h}.nic", "host_up", hb, 1 << 62, fifo=True)
                        for h in range(t.num_hosts)]
        self.tor_down = [EgressPort(sim, f"tor{t.rack_of(h)}->host{h}", "tor_down", hb, buf,
                                    queue_map=queue_map)
                         for h in range(t.num_hosts)]
        self.tor_up = [[EgressPort(sim, f"tor{r}->aggr{a}", "tor_up", cb, buf, queue_map=queue_map)
                        for a in range(t.num_aggr_switches)] for r in range(t.num_racks)]
        self.aggr_down = [[EgressPort(sim, f"aggr{a}->tor{r}", "aggr_down", cb, buf,
                                      queue_map=queue_map)
                           for r in range(t.num_racks)] for a in range(t.num_aggr_switches)]

        delay = t.switch_delay_ns
        hpr = t.hosts_per_rack
        n_aggr = t.num_aggr_switches
        schedule = sim.schedule
        spray = self._spray_rng.randrange
        tor_down, tor_up, aggr_down = self.tor_down, self.tor_up, self.aggr_down

        def tor_receive(rack: int):
            def receive(pkt: Packet) -> None:
                dst = pkt.dst
                if dst // hpr == rack:
                    port = tor_down[dst]
                elif n_aggr == 1:
                    port = tor_up[rack][0]
                else:
                    port = tor_up[rack][spray(n_aggr)]
                schedule(sim.now + delay, port.enqueue, pkt)
            return receive

        def aggr_receive(aggr: int):
            def receive(pkt: Packet) -> None:
                schedule(sim.now + delay, aggr_down[aggr][pkt.dst // hpr].enqueue, pkt)
            return receive

        tor_rx = [tor_receive(r) for r in range(t.num_racks)]
        aggr_rx = [aggr_receive(a) for a in range(n_aggr)]
        for h, port in enumerate(self.host_up):
            port.sink = tor_rx[t.rack_of(h)]
            port.on_tx_done = self._nic_done_hook(h)
        for port in self.tor_down:
            port.sink = self._arrive_at_host
        for r in range(t.num_racks):
            for a in range(n_aggr):
                tor_up[r][a].sink = aggr_rx[a]
                aggr_down[a][r].sink = tor_rx[r]
        for port in self.switch_ports():
            port.on_drop = self._count_drop

    def _nic_done_hook(self, host: int):
        def done(pkt: Packet) -> None:
            ep = self.endpoints[host]
            if ep is not None:
                ep.on_nic_tx_done(pkt)
        return done

    def _count_drop(self, pkt: Packet) -> None:
        self.dropped_bytes += pkt.wire_bytes

    def attach(self, host: int, endpoint: Endpoint) -> None:
        self.endpoints[host] = endpoint

    def inject_loss(self, rate: float) -> None:
        if not 0.0 <= rate <= 1.0:
            raise ValueError("loss rate must be within [0, 1]")
        self.loss_rate = rate

    def send_from_host(self, host: int, pkt: Packet) -> None:
        """Hand ``pkt`` to the NIC of ``host``; it is serialized in FIFO order."""
        pkt.sent_at = self.sim.now
        self.injected_bytes += pkt.wire_bytes
        self.injected_packets += 1
        if self.tracer is not None:
            self.tracer("send", self.sim.now, pkt)
        self.host_up[host].enqueue(pkt)

    def _arrive_at_host(self, pkt: Packet) -> None:
        if self.loss_rate and self._loss_rng.random() < self.loss_rate:
            self.loss_drops += 1
            self.dropped_bytes += pkt.wire_bytes
            return
        self.delivered_bytes += pkt.wire_bytes
        self.delivered_packets += 1
        if not pkt.retransmit:
            self.goodput_bytes += pkt.wire_bytes
        self.sim.schedule(self.sim.now + self.topology.sw_turnaround_ns,
                          self.deliver_to_host, pkt.dst, pkt)

    def deliver_to_host(self, host: int, pkt: Packet) -> None:
        """Hand a fully received packet to host software (after the turnaround delay)."""
        if self.tracer is not None:
            self.tracer("recv", self.sim.now, pkt)
        ep = self.endpoints[host]
        if ep is not None:
            ep.receive(pkt)

    def nic_idle(self, host: int) -> bool:
        return not self.host_up[host].busy

    def switch_ports(self) -> list[EgressPort]:
        ports = list(self.tor_down)
        for row in self.tor_up:
            ports.extend(row)
        for row in self.aggr_down:
            ports.extend(row)
        return ports

    def all_ports(self) -> list[EgressPort]:
        return list(self.host_up) + self.switch_ports()

    @property
    def in_flight_bytes(self) -> int:
        return self.injected_bytes - self.delivered_bytes - self.dropped_bytes

    @property
    def overflow_drops(self) -> int:
        return sum(p.drops for p in self.switch_ports())

    def port_stats(self, port: EgressPort) -> PortReport:
        return port.report(self.sim.now)

    def level_summary(self) -> dict[str, dict[str, float]]:
        """Mean and max queue bytes per port level, averaged over ports."""
        now = self.sim.now
        out: dict[str, dict[str, float]] = {}
        for level in ("tor_up", "aggr_down", "tor_down"):
            reports = [p.report(now) for p in self.switch_ports() if p.level == level]
            if not reports:
                continue
            out[level] = {
                "mean_bytes": sum(r.mean_bytes for r in reports) / len(reports),
                "max_bytes": max(r.max_bytes for r in reports),
                "drops": sum(r.drops for r in reports),
            }
        return out
