"""Homa transport state machines for one host.

A :class:`HomaTransport` owns both halves of a host's transport: the sender
(SRPT over messages with granted bytes, a bounded NIC queue, retransmission)
and the receiver (grant clock, overcommitment, scheduled priority assignment,
timeouts). It never touches the event queue directly. It reads the time from
a ``clock`` callable, hands packets to ``transmit`` and asks for periodic
``check_timeouts`` calls through ``arm_timer``, so it can be driven by the
simulator in :mod:`homasim.experiment` or by any other packet mover.
"""

from __future__ import annotations

import bisect
import heapq
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable

from .fabric import BUSY, DATA, GRANT, HIGHEST_PRIORITY, RESEND, Packet, WireModel
from .priority_alloc import (OnlineSizeEstimator, PriorityAllocation, SizeDistribution, allocate,
                             unsched_priority_for)
from .sim_core import NS_PER_MS

UNLIMITED = 1 << 30

ONEWAY, REQUEST, RESPONSE = "oneway", "request", "response"


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransportConfig:
    # None: derived from the topology by the experiment driver.
    rtt_bytes: int | None = None
    total_levels: int = 8
    unsched_levels: int | None = None
    cutoffs: tuple[int, ...] | None = None
    # None selects the number of scheduled levels; UNLIMITED disables the limit.
    overcommit: int | None = None
    unsched_limit: int | None = None
    resend_timeout_ns: int = 2 * NS_PER_MS
    max_resend_retries: int = 5
    incast_control: bool = True
    incast_threshold: int = 8
    incast_unsched_limit: int = 480
    nic_queue_packets: int = 2
    # Force every scheduled grant onto one level (pHost-style); None = dynamic.
    fixed_sched_level: int | None = None
    online_cutoffs: bool = False
    recompute_interval_ns: int = 10 * NS_PER_MS
    piggyback_bytes: int = 0
    carry_payload: bool = False
    audit: bool = False

    def __post_init__(self):
        if self.rtt_bytes is not None and self.rtt_bytes <= 0:
            raise ValueError("rtt_bytes must be > 0")
        if not 2 <= self.total_levels <= 8:
            raise ValueError("total_levels must be within 2..8")
        if self.overcommit is not None and self.overcommit < 1:
            raise ValueError("overcommit must be >= 1")
        if self.unsched_limit is not None and self.unsched_limit < 0:
            raise ValueError("unsched_limit must be >= 0")
        if self.resend_timeout_ns <= 0 or self.max_resend_retries < 0:
            raise ValueError("resend_timeout_ns must be > 0 and max_resend_retries >= 0")
        if self.incast_threshold < 0 or self.incast_unsched_limit < 0:
            raise ValueError("incast settings must be >= 0")
        if self.nic_queue_packets < 1:
            raise ValueError("nic_queue_packets must be >= 1")

    def resolved(self, rtt_bytes: int) -> TransportConfig:
        return self if self.rtt_bytes is not None else replace(self, rtt_bytes=rtt_bytes)

    @property
    def effective_unsched_limit(self) -> int:
        if self.rtt_bytes is None:
            raise ProtocolError("rtt_bytes is not resolved")
        return self.rtt_bytes if self.unsched_limit is None else self.unsched_limit

    def allocation(self, dist: SizeDistribution) -> PriorityAllocation:
        return allocate(dist, self.effective_unsched_limit, self.total_levels,
                        self.unsched_levels, self.cutoffs)

    def overcommit_degree(self, alloc: PriorityAllocation) -> int:
        if self.overcommit is not None:
            return self.overcommit
        return max(alloc.sched_levels, 1)


class OutboundMessage:
    __slots__ = ("rpc_id", "dst", "kind", "length", "next_offset", "granted", "unsched_bytes",
                 "unsched_prio", "sched_prio", "resend", "seq", "submit_time", "payload",
                 "incast_flag", "token", "queued", "retx_bytes", "sent_high", "announce",
                 "expire_at")

    def __init__(self, rpc_id, dst, kind, length, unsched_bytes, unsched_prio, seq, now,
                 payload, incast_flag):
        self.rpc_id = rpc_id
        self.dst = dst
        self.kind = kind
        self.length = length
        self.next_offset = 0
        self.unsched_bytes = unsched_bytes
        self.granted = unsched_bytes
        self.unsched_prio = unsched_prio
        self.sched_prio = 0
        self.resend: deque[list[int]] = deque()
        self.seq = seq
        self.submit_time = now
        self.payload = payload
        self.incast_flag = incast_flag
        self.token = 0
        self.queued = False
        self.retx_bytes = 0
        self.sent_high = 0
        self.announce = unsched_bytes == 0
        self.expire_at = -1

    @property
    def is_response(self) -> bool:
        return self.kind == RESPONSE

    @property
    def remaining(self) -> int:
        return self.length - self.next_offset

    def transmittable(self) -> bool:
        return bool(self.resend) or self.announce or self.next_offset < self.granted

    def restart(self) -> None:
        self.next_offset = 0
        self.granted = self.unsched_bytes
        self.resend.clear()
        self.announce = self.unsched_bytes == 0
        self.expire_at = -1


class InboundMessage:
    __slots__ = ("rpc_id", "src", "kind", "length", "ranges", "received", "granted",
                 "unsched_bytes", "seq", "sched_prio", "active", "last_heard", "retries", "buf",
                 "incast_flag", "sched_key", "first_arrival")

    def __init__(self, rpc_id, src, kind, length, unsched_bytes, seq, now, incast_flag,
                 carry_payload):
        self.rpc_id = rpc_id
        self.src = src
        self.kind = kind
        self.length = length
        self.ranges: list[list[int]] = []
        self.received = 0
        self.granted = min(unsched_bytes, length)
        self.unsched_bytes = unsched_bytes
        self.seq = seq
        self.sched_prio: int | None = None
        self.active = False
        self.last_heard = now
        self.first_arrival = now
        self.retries = 0
        self.buf = bytearray(length) if carry_payload else None
        self.incast_flag = incast_flag
        self.sched_key: tuple[int, int] | None = None

    @property
    def is_response(self) -> bool:
        return self.kind == RESPONSE

    def add_range(self, start: int, end: int) -> int:
        """Record ``[start, end)`` and return the number of new bytes."""
        if end <= start:
            return 0
        ranges = self.ranges
        if not ranges or ranges[-1][1] < start:
            ranges.append([start, end])
            self.received += end - start
            return end - start
        last = ranges[-1]
        if last[1] == start:
            last[1] = end
            self.received += end - start
            return end - start
        # General case: merge into the sorted, disjoint interval list.
        i = bisect.bisect_right(ranges, [start, end]) - 1
        if i < 0:
            i = 0
        while i < len(ranges) and ranges[i][1] < start:
            i += 1
        lo, hi = start, end
        j = i
        covered = 0
        while j < len(ranges) and ranges[j][0] <= end:
            a, b = ranges[j]
            covered += max(0, min(b, end) - max(a, start))
            lo = min(lo, a)
            hi = max(hi, b)
            j += 1
        ranges[i:j] = [[lo, hi]]
        new = (end - start) - covered
        self.received += new
        return new

    def first_gap(self, limit: int) -> tuple[int, int] | None:
        """First missing range below ``limit``."""
        pos = 0
        for a, b in self.ranges:
            if a > pos:
                return pos, min(a, limit)
            pos = max(pos, b)
            if pos >= limit:
                return None
        return (pos, limit) if pos < limit else None


@dataclass
class ClientRpc:
    rpc_id: int
    server: int
    request_length: int
    response_length: int
    issue_time: int
    flagged: bool
    last_heard: int
    retries: int = 0
    timer_started: bool = False


@dataclass
class TransportStats:
    data_packets: int = 0
    grants: int = 0
    resends_sent: int = 0
    busy_sent: int = 0
    retx_bytes: int = 0
    aborts: int = 0
    server_aborts: int = 0
    restarts: int = 0
    unsched_bytes_sent: int = 0
    flagged_unsched_bytes: int = 0
    flagged_requests: int = 0
    violations: int = 0
    violation_log: list[str] = field(default_factory=list)


class HomaTransport:
    """Sender and receiver state for one host.

    ``on_message(host, kind, msg, payload, pkt)`` fires when a message is
    fully received (``msg`` is the :class:`InboundMessage`); ``on_abort(host, kind, rpc_id)`` when the
    receiver gives up on one. Requests are answered by calling
    :meth:`send_response` (usually from ``on_message``).
    """

    def __init__(self, host: int, config: TransportConfig, alloc: PriorityAllocation,
                 wire: WireModel, clock: Callable[[], int], transmit: Callable[[Packet], None],
                 arm_timer: Callable[[int], None] | None = None):
        self.host = host
        self.config = config
        self.alloc = alloc
        self.wire = wire
        self.clock = clock
        self.transmit = transmit
        self.arm_timer = arm_timer
        if config.rtt_bytes is None:
            raise ProtocolError("TransportConfig.rtt_bytes must be resolved first")
        self.rtt_bytes = config.rtt_bytes
        self.K = config.overcommit_degree(alloc)
        self.S = max(alloc.sched_levels, 1)
        self.nic_limit = config.nic_queue_packets * wire.full_packet
        self.nic_bytes = 0
        self.stats = TransportStats()

        self.on_message: Callable | None = None
        self.on_abort: Callable | None = None
        self.on_retransmit: Callable[[int, int, int], None] | None = None
        self.on_sched_pressure: Callable[[int, bool], None] | None = None

        self._ctrl: deque[Packet] = deque()
        self._ready: list = []
        self._out: dict[tuple[int, bool], OutboundMessage] = {}
        self._in: dict[tuple[int, bool], InboundMessage] = {}
        self._sched: list = []
        self._withholding = False
        self._completed: set[tuple[int, bool]] = set()
        self._rpcs: dict[int, ClientRpc] = {}
        self._seq = 0
        self._next_rpc = 0
        self._timer_armed = False
        self.outstanding_rpcs = 0

        self.estimator = (OnlineSizeEstimator(alloc, config.recompute_interval_ns)
                          if config.online_cutoffs else None)
        self._dest_alloc: dict[int, PriorityAllocation] = {}
        self._peer_version: dict[int, int] = {}

    # ------------------------------------------------------------------ sender

    def new_rpc_id(self) -> int:
        self._next_rpc += 1
        return (self.host << 32) | self._next_rpc

    def _alloc_for(self, dst: int) -> PriorityAllocation:
        return self._dest_alloc.get(dst, self.alloc)

    def send_message(self, dst: int, length: int, payload: bytes | None = None,
                     rpc_id: int | None = None) -> int:
        """Submit a one-way message; returns its id."""
        if length < 1:
            raise ValueError("message length must be >= 1")
        rpc_id = self.new_rpc_id() if rpc_id is None else rpc_id
        self._submit(rpc_id, dst, ONEWAY, length, payload, False,
                     self.config.effective_unsched_limit)
        return rpc_id

    def send_request(self, dst: int, length: int, response_length: int,
                     payload: bytes | None = None, rpc_id: int | None = None) -> int:
        """Issue an RPC; the response arrives through ``on_message``."""
        if length < 1:
            raise ValueError("request length must be >= 1")
        cfg = self.config
        rpc_id = self.new_rpc_id() if rpc_id is None else rpc_id
        # Flag when the count already outstanding strictly exceeds the threshold.
        flagged = cfg.incast_control and self.outstanding_rpcs > cfg.incast_threshold
        if flagged:
            self.stats.flagged_requests += 1
        self.outstanding_rpcs += 1
        now = self.clock()
        self._rpcs[rpc_id] = ClientRpc(rpc_id, dst, length, response_length, now, flagged, now)
        self._submit(rpc_id, dst, REQUEST, length, payload, flagged,
                     cfg.effective_unsched_limit)
        return rpc_id

    def send_response(self, rpc_id: int, client: int, length: int, incast_flag: bool,
                      payload: bytes | None = None) -> None:
        cfg = self.config
        limit = cfg.effective_unsched_limit
        if incast_flag:
            limit = min(limit, cfg.incast_unsched_limit)
        self._submit(rpc_id, client, RESPONSE, length, payload, incast_flag, limit)

    def _submit(self, rpc_id, dst, kind, length, payload, incast_flag, unsched_limit):
        alloc = self._alloc_for(dst)
        unsched = min(length, unsched_limit)
        self._seq += 1
        msg = OutboundMessage(rpc_id, dst, kind, length, unsched, unsched_priority_for(length, alloc),
                              self._seq, self.clock(), payload, incast_flag)
        self._out[(rpc_id, kind == RESPONSE)] = msg
        self._make_ready(msg)
        self._pump()

    def _make_ready(self, msg: OutboundMessage) -> None:
        if msg.transmittable():
            msg.token += 1
            msg.queued = True
            heapq.heappush(self._ready, (msg.length - msg.next_offset, msg.seq, msg.token, msg))

    def _top_ready(self) -> OutboundMessage | None:
        heap = self._ready
        while heap:
            _, _, tok, msg = heap[0]
            if tok == msg.token and msg.queued and msg.transmittable():
                return msg
            heapq.heappop(heap)
            if tok == msg.token:
                msg.queued = False
        return None

    def _send_ctrl(self, pkt: Packet) -> None:
        if self.estimator is not None:
            self._piggyback(pkt)
        self._ctrl.append(pkt)

    def _pump(self) -> None:
        ctrl = self._ctrl
        while ctrl:
            pkt = ctrl.popleft()
            self.nic_bytes += pkt.wire_bytes
            self.transmit(pkt)
        heap = self._ready
        wire = self.wire
        maxp = wire.max_payload
        overhead = wire.per_packet_overhead
        limit = self.nic_limit
        while heap:
            _, _, tok, msg = heap[0]
            if tok != msg.token or not msg.transmittable():
                heapq.heappop(heap)
                if tok == msg.token:
                    msg.queued = False
                continue
            retx = False
            if msg.resend:
                rng = msg.resend[0]
                offset = rng[0]
                n = min(maxp, rng[1] - offset)
                retx = True
            elif msg.announce:
                offset, n = 0, 0
            else:
                offset = msg.next_offset
                n = msg.granted - offset
                if n > maxp:
                    n = maxp
            wb = overhead + n
            if self.nic_bytes + wb > limit:
                break
            if retx:
                rng[0] += n
                if rng[0] >= rng[1]:
                    msg.resend.popleft()
            elif msg.announce:
                msg.announce = False
            else:
                msg.next_offset = offset + n
            if offset + n > msg.sent_high:
                msg.sent_high = offset + n
            elif n:
                retx = True
            prio = msg.unsched_prio if offset < msg.unsched_bytes else msg.sched_prio
            pkt = Packet(DATA, self.host, msg.dst, msg.rpc_id, wb, is_response=msg.kind == RESPONSE,
                         priority=prio, offset=offset, length=n, message_length=msg.length,
                         incast_flag=msg.incast_flag, unsched_bytes=msg.unsched_bytes,
                         retransmit=retx)
            if msg.payload is not None:
                pkt.payload = msg.payload[offset:offset + n]
            st = self.stats
            st.data_packets += 1
            if retx:
                msg.retx_bytes += n
                st.retx_bytes += n
                if self.on_retransmit is not None:
                    self.on_retransmit(msg.rpc_id, msg.kind == RESPONSE, n)
            elif offset < msg.unsched_bytes:
                st.unsched_bytes_sent += n
                if msg.kind == RESPONSE and msg.incast_flag:
                    st.flagged_unsched_bytes += n
            if self.estimator is not None:
                self._piggyback(pkt)
            self.nic_bytes += wb
            self.transmit(pkt)
            # Re-key the message under its new remaining count.
            msg.token += 1
            if msg.transmittable():
                heapq.heapreplace(heap, (msg.length - msg.next_offset, msg.seq, msg.token, msg))
            else:
                heapq.heappop(heap)
                msg.queued = False
                if msg.next_offset >= msg.length and msg.kind == ONEWAY and msg.expire_at < 0:
                    cfg = self.config
                    msg.expire_at = (self.clock() + cfg.resend_timeout_ns
                                     * (cfg.max_resend_retries + 1))
                    self._arm()
            if msg.kind == REQUEST and offset + n >= msg.unsched_bytes:
                rpc = self._rpcs.get(msg.rpc_id)
                if rpc is not None and not rpc.timer_started:
                    rpc.timer_started = True
                    rpc.last_heard = self.clock()
                    self._arm()

    def on_nic_tx_done(self, pkt: Packet) -> None:
        self.nic_bytes -= pkt.wire_bytes
        if pkt.kind == DATA and pkt.is_response and pkt.offset + pkt.length >= pkt.message_length:
            # A server forgets the RPC once the last response byte is on the wire.
            key = (pkt.rpc_id, True)
            msg = self._out.get(key)
            if msg is not None and msg.next_offset >= msg.length and not msg.resend:
                del self._out[key]
        self._pump()

    def _on_grant(self, pkt: Packet) -> None:
        key = (pkt.rpc_id, pkt.is_response)
        if not pkt.is_response:
            self._touch_rpc(pkt.rpc_id)
        msg = self._out.get(key)
        if msg is None:
            return
        limit = min(pkt.offset, msg.length)
        if limit > msg.granted:
            msg.granted = limit
        msg.sched_prio = pkt.grant_level
        if not msg.queued:
            self._make_ready(msg)

    def _on_resend(self, pkt: Packet) -> None:
        key = (pkt.rpc_id, pkt.is_response)
        if not pkt.is_response:
            self._touch_rpc(pkt.rpc_id)
        msg = self._out.get(key)
        if msg is None:
            if pkt.is_response:
                self._resend_unknown_response(pkt)
            return
        if pkt.restart:
            self.stats.restarts += 1
            msg.restart()
            msg.token += 1
            msg.queued = False
            self._make_ready(msg)
            return
        start = pkt.offset
        end = min(pkt.offset + pkt.length, msg.length)
        if end > msg.granted:
            msg.granted = end
        if start < msg.next_offset:
            msg.resend.append([start, min(end, msg.next_offset)])
        elif start == 0 and msg.unsched_bytes == 0 and msg.next_offset == 0:
            msg.announce = True
        top = self._top_ready()
        if top is not None and top is not msg and top.remaining < msg.remaining:
            self.stats.busy_sent += 1
            self._send_ctrl(Packet(BUSY, self.host, pkt.src, msg.rpc_id, self.wire.control_packet,
                                   is_response=msg.kind == RESPONSE))
        if not msg.queued:
            self._make_ready(msg)

    def _resend_unknown_response(self, pkt: Packet) -> None:
        # A client asks for a response this server knows nothing about.
        if (pkt.rpc_id, False) in self._in:
            # Still receiving the request; the BUSY answers for the response.
            self.stats.busy_sent += 1
            self._send_ctrl(Packet(BUSY, self.host, pkt.src, pkt.rpc_id, self.wire.control_packet,
                                   is_response=True))
            return
        self.stats.resends_sent += 1
        self._send_ctrl(Packet(RESEND, self.host, pkt.src, pkt.rpc_id, self.wire.control_packet,
                               is_response=False, offset=0, length=self.rtt_bytes, restart=True))

    # ---------------------------------------------------------------- receiver

    def receive(self, pkt: Packet) -> None:
        if pkt.cutoffs is not None:
            self._dest_alloc[pkt.src] = pkt.cutoffs
        kind = pkt.kind
        if kind == DATA:
            self._on_data(pkt)
        elif kind == GRANT:
            self._on_grant(pkt)
        elif kind == RESEND:
            self._on_resend(pkt)
        else:
            self._on_busy(pkt)
        self._pump()

    def _touch_rpc(self, rpc_id: int) -> None:
        rpc = self._rpcs.get(rpc_id)
        if rpc is not None:
            rpc.last_heard = self.clock()
            rpc.retries = 0

    def _on_busy(self, pkt: Packet) -> None:
        msg = self._in.get((pkt.rpc_id, pkt.is_response))
        if msg is not None:
            msg.last_heard = self.clock()
            msg.retries = 0
        self._touch_rpc(pkt.rpc_id)

    def _on_data(self, pkt: Packet) -> None:
        key = (pkt.rpc_id, pkt.is_response)
        msg = self._in.get(key)
        now = self.clock()
        if msg is None:
            msg = self._new_inbound(pkt, key, now)
            if msg is None:
                return
        n = pkt.length
        new = msg.add_range(pkt.offset, pkt.offset + n) if n else 0
        if new and msg.buf is not None and pkt.payload is not None:
            msg.buf[pkt.offset:pkt.offset + n] = pkt.payload
        msg.last_heard = now
        msg.retries = 0
        if pkt.is_response:
            self._touch_rpc(pkt.rpc_id)
        if msg.received >= msg.length:
            self._complete(key, msg, pkt)
            return
        if msg.sched_key is not None:
            if new:
                self._sched_move(msg)
            self._refresh()
        elif msg.granted < msg.length:
            self._sched_insert(msg)
            self._refresh()

    def _new_inbound(self, pkt: Packet, key, now) -> InboundMessage | None:
        if key in self._completed:
            return None
        if pkt.is_response:
            if pkt.rpc_id not in self._rpcs:
                return None
            kind = RESPONSE
        elif (pkt.rpc_id, True) in self._out:
            return None  # duplicate request while its response is still going out
        else:
            kind = REQUEST if self._is_request(pkt) else ONEWAY
        self._seq += 1
        msg = InboundMessage(pkt.rpc_id, pkt.src, kind, pkt.message_length, pkt.unsched_bytes,
                             self._seq, now, pkt.incast_flag, self.config.carry_payload)
        self._in[key] = msg
        if self.estimator is not None:
            self.estimator.observe(pkt.message_length)
            if self.estimator.maybe_recompute(now):
                self._adopt_online_allocation()
        self._arm()
        return msg

    # Requests and one-way messages look alike on the wire; the experiment
    # tells each transport which mode it runs in.
    rpc_mode = False

    def _is_request(self, pkt: Packet) -> bool:
        return self.rpc_mode

    def _complete(self, key, msg: InboundMessage, pkt: Packet) -> None:
        del self._in[key]
        if msg.sched_key is not None:
            self._sched_remove(msg)
            self._refresh()
        payload = bytes(msg.buf) if msg.buf is not None else None
        if msg.kind == RESPONSE:
            rpc = self._rpcs.pop(msg.rpc_id, None)
            self._out.pop((msg.rpc_id, False), None)
            if rpc is not None:
                self.outstanding_rpcs -= 1
        elif msg.kind == ONEWAY:
            self._completed.add(key)
        if self.on_message is not None:
            self.on_message(self.host, msg.kind, msg, payload, pkt)

    # Scheduled messages live in ``_sched`` sorted by (bytes left to receive,
    # arrival sequence); the first K entries are the active set.

    def _sched_insert(self, msg: InboundMessage) -> None:
        k = (msg.length - msg.received, msg.seq)
        msg.sched_key = k
        bisect.insort(self._sched, (k[0], k[1], msg))
        self._note_pressure()

    def _sched_remove(self, msg: InboundMessage) -> None:
        k = msg.sched_key
        lst = self._sched
        i = bisect.bisect_left(lst, k)
        del lst[i]
        msg.sched_key = None
        if msg.active:
            msg.active = False
        msg.sched_prio = None
        self._note_pressure()

    def _sched_move(self, msg: InboundMessage) -> None:
        lst = self._sched
        k = msg.sched_key
        i = bisect.bisect_left(lst, k)
        del lst[i]
        k = (msg.length - msg.received, msg.seq)
        msg.sched_key = k
        bisect.insort(lst, (k[0], k[1], msg))

    def _note_pressure(self) -> None:
        w = len(self._sched) > self.K
        if w != self._withholding:
            self._withholding = w
            if self.on_sched_pressure is not None:
                self.on_sched_pressure(self.clock(), w)

    def _refresh(self) -> None:
        """Recompute activity and levels at the head of the schedule and grant."""
        K = self.K
        S = self.S
        fixed = self.config.fixed_sched_level
        lst = self._sched
        # A fully granted message keeps its slot until its bytes arrive, so
        # at most K messages ever have grants outstanding.
        n = len(lst)
        m = n if n < K else K
        top = (m if m < S else S) - 1
        # One past the active set, to deactivate a message pushed out of it.
        window = K + 1 if K < n else n
        for i in range(window):
            msg = lst[i][2]
            if i < m:
                lvl = top - i
                if lvl < 0:
                    lvl = 0
                msg.sched_prio = fixed if fixed is not None else lvl
                msg.active = True
                self._maybe_grant(msg)
            else:
                msg.active = False
                msg.sched_prio = None
        if self.config.audit:
            self._audit()

    def _maybe_grant(self, msg: InboundMessage) -> None:
        target = msg.received + self.rtt_bytes
        if target > msg.length:
            target = msg.length
        if target <= msg.granted:
            return
        if msg.received >= msg.granted:
            # Nothing was outstanding; restart the silence timer from here.
            msg.last_heard = self.clock()
        msg.granted = target
        if target - msg.received > self.rtt_bytes:
            self._violation(f"grant window exceeded for {msg.rpc_id}")
        self.stats.grants += 1
        self._send_ctrl(Packet(GRANT, self.host, msg.src, msg.rpc_id, self.wire.control_packet,
                               is_response=msg.kind == RESPONSE, offset=target,
                               grant_level=msg.sched_prio))

    def _violation(self, text: str) -> None:
        st = self.stats
        st.violations += 1
        if len(st.violation_log) < 20:
            st.violation_log.append(f"t={self.clock()} host={self.host}: {text}")

    def _audit(self) -> None:
        active = [e[2] for e in self._sched if e[2].active]
        for msg in self._in.values():
            if msg.granted - msg.received > self.rtt_bytes and msg.granted > msg.unsched_bytes:
                self._violation(f"window {msg.granted - msg.received} for {msg.rpc_id}")
            if msg.active and msg.sched_key is None:
                self._violation(f"active message {msg.rpc_id} outside the schedule")
        if len(active) > self.K:
            self._violation(f"{len(active)} active messages exceed K={self.K}")
        if self.config.fixed_sched_level is None and self.K <= self.S:
            levels = sorted(m.sched_prio for m in active)
            if levels != list(range(len(active))):
                self._violation(f"scheduled levels {levels} are not a distinct lowest prefix")
        expect = [e[2] for e in self._sched[:self.K]]
        if active != expect:
            self._violation("active set differs from the SRPT head of the schedule")

    # ---------------------------------------------------------------- timers

    def _arm(self) -> None:
        if not self._timer_armed and self.arm_timer is not None:
            self._timer_armed = True
            self.arm_timer(max(self.config.resend_timeout_ns // 4, 1))

    def has_timed_state(self) -> bool:
        return bool(self._in or self._rpcs
                    or any(m.expire_at >= 0 for m in self._out.values()))

    def check_timeouts(self) -> None:
        """Periodic scan for silent messages; re-arms itself while state remains."""
        self._timer_armed = False
        now = self.clock()
        cfg = self.config
        timeout = cfg.resend_timeout_ns
        for key, msg in list(self._in.items()):
            if msg.received >= msg.granted and msg.granted < msg.length:
                msg.last_heard = now  # waiting on our own grants, not on the sender
                continue
            if now - msg.last_heard < timeout:
                continue
            msg.retries += 1
            if msg.retries > cfg.max_resend_retries:
                self._abort_inbound(key, msg)
                continue
            msg.last_heard = now
            gap = msg.first_gap(max(msg.granted, 1))
            start, end = gap if gap is not None else (0, msg.granted)
            end = min(end, start + self.rtt_bytes)
            self._send_resend(msg.src, msg.rpc_id, msg.kind == RESPONSE, start, end - start,
                              msg.sched_prio if msg.sched_prio is not None else 0)
        for rpc in list(self._rpcs.values()):
            if not rpc.timer_started or (rpc.rpc_id, True) in self._in:
                continue
            if now - rpc.last_heard < timeout:
                continue
            rpc.retries += 1
            if rpc.retries > cfg.max_resend_retries:
                self._abort_rpc(rpc)
                continue
            rpc.last_heard = now
            self._send_resend(rpc.server, rpc.rpc_id, True, 0, self.rtt_bytes, 0)
        for key, msg in list(self._out.items()):
            if 0 <= msg.expire_at <= now and not msg.transmittable():
                del self._out[key]
        self._pump()
        if self.has_timed_state():
            self._arm()

    def _send_resend(self, dst, rpc_id, is_response, offset, length, prio) -> None:
        self.stats.resends_sent += 1
        self._send_ctrl(Packet(RESEND, self.host, dst, rpc_id, self.wire.control_packet,
                               is_response=is_response, offset=offset, length=length,
                               priority=HIGHEST_PRIORITY))

    def _abort_inbound(self, key, msg: InboundMessage) -> None:
        del self._in[key]
        if msg.sched_key is not None:
            self._sched_remove(msg)
            self._refresh()
        if msg.kind == RESPONSE:
            rpc = self._rpcs.get(msg.rpc_id)
            if rpc is not None:
                self._abort_rpc(rpc)
            return
        if msg.kind == REQUEST:
            self.stats.server_aborts += 1
            return
        self.stats.aborts += 1
        self._completed.add(key)
        if self.on_abort is not None:
            self.on_abort(self.host, msg.kind, msg.rpc_id)

    def _abort_rpc(self, rpc: ClientRpc) -> None:
        self._rpcs.pop(rpc.rpc_id, None)
        self._out.pop((rpc.rpc_id, False), None)
        key = (rpc.rpc_id, True)
        msg = self._in.pop(key, None)
        if msg is not None and msg.sched_key is not None:
            self._sched_remove(msg)
            self._refresh()
        self._completed.add(key)
        self.outstanding_rpcs -= 1
        self.stats.aborts += 1
        if self.on_abort is not None:
            self.on_abort(self.host, RESPONSE, rpc.rpc_id)

    # ---------------------------------------------------- test/fault hooks

    def forget_rpc(self, rpc_id: int) -> bool:
        """Drop all server-side state for ``rpc_id`` (fault injection)."""
        gone = self._out.pop((rpc_id, True), None) is not None
        msg = self._in.pop((rpc_id, False), None)
        if msg is not None:
            if msg.sched_key is not None:
                self._sched_remove(msg)
                self._refresh()
            gone = True
        return gone

    # ------------------------------------------------------- online cutoffs

    def _adopt_online_allocation(self) -> None:
        self.alloc = self.estimator.allocation
        self.S = max(self.alloc.sched_levels, 1)
        if self.config.overcommit is None:
            self.K = self.S

    def _piggyback(self, pkt: Packet) -> None:
        alloc = self.estimator.allocation
        if alloc.version and self._peer_version.get(pkt.dst, 0) < alloc.version:
            self._peer_version[pkt.dst] = alloc.version
            pkt.cutoffs = alloc
            if self.config.piggyback_bytes:
                pkt.wire_bytes += self.config.piggyback_bytes

    # ------------------------------------------------------------ inspection

    def active_messages(self) -> list[InboundMessage]:
        return [e[2] for e in self._sched if e[2].active]

    def inbound(self, rpc_id: int, is_response: bool = False) -> InboundMessage | None:
        return self._in.get((rpc_id, is_response))

    def outbound(self, rpc_id: int, is_response: bool = False) -> OutboundMessage | None:
        return self._out.get((rpc_id, is_response))

    @property
    def withholding(self) -> bool:
        return self._withholding


def with_overrides(config: TransportConfig, **changes) -> TransportConfig:
    return replace(config, **changes)
