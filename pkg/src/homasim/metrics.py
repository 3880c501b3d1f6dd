"""Completion records and the analyses built on them.

Percentiles use the nearest-rank rule throughout. Slowdown is observed
completion time over the unloaded completion time of a message of the same
size on the same kind of path (in-rack or cross-rack).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .priority_alloc import SizeDistribution


@dataclass(slots=True)
class CompletionRecord:
    rpc_id: int
    size: int
    submit_ns: int
    src: int = -1
    dst: int = -1
    finish_ns: int = -1
    retx_bytes: int = 0
    aborted: bool = False
    same_rack: bool = False
    # Filled for single-packet messages only; -1 otherwise.
    lag_ns: int = -1
    queue_ns: int = -1
    sender_wait_ns: int = -1

    @property
    def completed(self) -> bool:
        return self.finish_ns >= 0 and not self.aborted

    @property
    def latency_ns(self) -> int:
        return self.finish_ns - self.submit_ns


class Collector:
    def __init__(self):
        self.records: dict[int, CompletionRecord] = {}

    def submitted(self, rpc_id: int, size: int, now: int, src: int, dst: int,
                  same_rack: bool) -> CompletionRecord:
        rec = CompletionRecord(rpc_id, size, now, src, dst, same_rack=same_rack)
        self.records[rpc_id] = rec
        return rec

    def finished(self, rpc_id: int, now: int) -> CompletionRecord | None:
        rec = self.records.get(rpc_id)
        if rec is not None and rec.finish_ns < 0 and not rec.aborted:
            rec.finish_ns = now
        return rec

    def aborted(self, rpc_id: int) -> None:
        rec = self.records.get(rpc_id)
        if rec is not None and rec.finish_ns < 0:
            rec.aborted = True

    def retransmitted(self, rpc_id: int, nbytes: int) -> None:
        rec = self.records.get(rpc_id)
        if rec is not None:
            rec.retx_bytes += nbytes

    def ordered(self) -> list[CompletionRecord]:
        return sorted(self.records.values(), key=lambda r: (r.submit_ns, r.rpc_id))


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile of ``values`` (no interpolation)."""
    if not values:
        raise ValueError("no values")
    if not 0 < pct <= 100:
        raise ValueError("pct must be within (0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100 * len(ordered)))
    return ordered[rank - 1]


BestCase = Callable[[int, bool], int]


def slowdown(rec: CompletionRecord, best_case: BestCase) -> float:
    return rec.latency_ns / best_case(rec.size, rec.same_rack)


def measured(records: Iterable[CompletionRecord], warmup_ns: int = 0) -> list[CompletionRecord]:
    """Completed, non-aborted records submitted after the warm-up."""
    return [r for r in records if r.completed and r.submit_ns >= warmup_ns]


@dataclass
class SpectrumBucket:
    lo: int
    hi: int
    p50: float | None
    p99: float | None
    count: int


def decile_edges(dist: SizeDistribution, buckets: int = 10) -> list[int]:
    return [dist.quantile(k / buckets) for k in range(1, buckets + 1)]


def slowdown_spectrum(records: Iterable[CompletionRecord], dist: SizeDistribution,
                      best_case: BestCase, warmup_ns: int = 0, buckets: int = 10,
                      percentiles: tuple[float, float] = (50, 99)) -> list[SpectrumBucket]:
    """Slowdown percentiles per message-count decile of ``dist``.

    Bucket ``i`` holds sizes in ``(edge[i-1], edge[i]]``; when two deciles fall
    on the same size the later bucket is empty.
    """
    recs = measured(records, warmup_ns)
    if not recs:
        raise ValueError("no completed records")
    edges = decile_edges(dist, buckets)
    groups: list[list[float]] = [[] for _ in edges]
    for r in recs:
        i = _bucket_of(edges, r.size)
        groups[i].append(slowdown(r, best_case))
    out = []
    lo = 0
    for edge, vals in zip(edges, groups):
        if vals:
            out.append(SpectrumBucket(lo, edge, nearest_rank(vals, percentiles[0]),
                                      nearest_rank(vals, percentiles[1]), len(vals)))
        else:
            out.append(SpectrumBucket(lo, edge, None, None, 0))
        lo = max(lo, edge)
    return out


def _bucket_of(edges: list[int], size: int) -> int:
    for i, e in enumerate(edges):
        if size <= e:
            return i
    return len(edges) - 1


def small_message_tail(records: Iterable[CompletionRecord], dist: SizeDistribution,
                       best_case: BestCase, warmup_ns: int = 0, fraction: float = 0.1,
                       pct: float = 99) -> tuple[float, int]:
    """Percentile slowdown over the smallest ``fraction`` of messages by count."""
    limit = dist.quantile(fraction)
    vals = [slowdown(r, best_case) for r in measured(records, warmup_ns) if r.size <= limit]
    if not vals:
        raise ValueError("no small messages completed")
    return nearest_rank(vals, pct), len(vals)


class WasteTracker:
    """Time a receiver's downlink is idle while it withholds grants.

    Both inputs are level signals; the tracker integrates the time both are
    true, starting from ``start_ns``.
    """

    __slots__ = ("idle", "withholding", "since", "total", "start")

    def __init__(self, start_ns: int = 0):
        self.idle = True
        self.withholding = False
        self.since = 0
        self.total = 0
        self.start = start_ns

    def _advance(self, now: int) -> None:
        if self.idle and self.withholding:
            lo = max(self.since, self.start)
            if now > lo:
                self.total += now - lo
        self.since = now

    def link(self, now: int, idle: bool) -> None:
        self._advance(now)
        self.idle = idle

    def pressure(self, now: int, withholding: bool) -> None:
        self._advance(now)
        self.withholding = withholding

    def wasted(self, now: int) -> int:
        self._advance(now)
        return self.total


def wasted_fraction(trackers: Sequence[WasteTracker], start_ns: int, end_ns: int) -> float:
    span = end_ns - start_ns
    if span <= 0 or not trackers:
        return 0.0
    return sum(t.wasted(end_ns) for t in trackers) / (len(trackers) * span)


def priority_usage(bytes_by_level: Sequence[int], num_hosts: int, host_bps: int,
                   span_ns: int) -> list[float]:
    """Downlink bytes per level as a fraction of total downlink capacity."""
    capacity = num_hosts * host_bps / 8 * span_ns / 1e9
    if capacity <= 0:
        return [0.0] * len(bytes_by_level)
    return [b / capacity for b in bytes_by_level]


@dataclass
class DelayBreakdown:
    count: int
    observed_ns: float
    best_case_ns: float
    preemption_lag_ns: float
    queueing_ns: float
    sender_wait_ns: float
    selected: list[CompletionRecord] = field(default_factory=list, repr=False)

    @property
    def residual_ns(self) -> float:
        return self.observed_ns - (self.best_case_ns + self.preemption_lag_ns
                                   + self.queueing_ns + self.sender_wait_ns)


def tail_delay_breakdown(records: Iterable[CompletionRecord], dist: SizeDistribution,
                         best_case: BestCase, warmup_ns: int = 0, fraction: float = 0.2,
                         pct: float = 99) -> DelayBreakdown:
    """Average delay components of the short messages at or beyond the ``pct`` tail.

    Only single-packet messages carry per-hop causes; the smallest ``fraction``
    of messages are single-packet for every packaged workload but W5.
    """
    limit = dist.quantile(fraction)
    pool = [r for r in measured(records, warmup_ns)
            if r.size <= limit and r.lag_ns >= 0 and r.retx_bytes == 0]
    if not pool:
        return DelayBreakdown(0, 0.0, 0.0, 0.0, 0.0, 0.0)
    cut = nearest_rank([r.latency_ns for r in pool], pct)
    sel = [r for r in pool if r.latency_ns >= cut]
    n = len(sel)
    return DelayBreakdown(
        n,
        sum(r.latency_ns for r in sel) / n,
        sum(best_case(r.size, r.same_rack) for r in sel) / n,
        sum(r.lag_ns for r in sel) / n,
        sum(r.queue_ns for r in sel) / n,
        sum(r.sender_wait_ns for r in sel) / n,
        sel,
    )


# --------------------------------------------------------------------- CSV

COMPLETION_COLUMNS = ("rpc_id", "size", "submit_ns", "finish_ns", "retx_bytes", "aborted")
SPECTRUM_COLUMNS = ("bucket_lo", "bucket_hi", "p50", "p99", "count")
PORT_COLUMNS = ("port", "level", "mean_bytes", "max_bytes", "drops", "tx_packets", "tx_bytes")
WASTE_COLUMNS = ("load", "overcommit", "wasted_fraction", "surplus")
PRIO_COLUMNS = ("level", "bytes", "fraction_of_capacity")
BREAKDOWN_COLUMNS = ("count", "observed_ns", "best_case_ns", "preemption_lag_ns",
                     "queueing_ns", "sender_wait_ns")


def _write(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6f}"


def write_completions(path: Path, records: Iterable[CompletionRecord]) -> None:
    _write(path, COMPLETION_COLUMNS,
           ((r.rpc_id, r.size, r.submit_ns, r.finish_ns, r.retx_bytes, int(r.aborted))
            for r in records))


def write_spectrum(path: Path, buckets: Iterable[SpectrumBucket]) -> None:
    _write(path, SPECTRUM_COLUMNS,
           ((b.lo, b.hi, _fmt(b.p50), _fmt(b.p99), b.count) for b in buckets))


def write_ports(path: Path, reports) -> None:
    _write(path, PORT_COLUMNS,
           ((r.name, r.level, f"{r.mean_bytes:.3f}", r.max_bytes, r.drops, r.tx_packets,
             r.tx_bytes) for r in reports))


def write_waste(path: Path, rows: Iterable[tuple[float, str, float]]) -> None:
    _write(path, WASTE_COLUMNS,
           ((f"{load:.4f}", k, f"{w:.6f}", f"{1 - load:.4f}") for load, k, w in rows))


def write_priousage(path: Path, bytes_by_level: Sequence[int], fractions: Sequence[float]) -> None:
    _write(path, PRIO_COLUMNS,
           ((lvl, b, f"{f:.6f}") for lvl, (b, f) in enumerate(zip(bytes_by_level, fractions))))


def write_breakdown(path: Path, bd: DelayBreakdown) -> None:
    _write(path, BREAKDOWN_COLUMNS,
           [(bd.count, f"{bd.observed_ns:.1f}", f"{bd.best_case_ns:.1f}",
             f"{bd.preemption_lag_ns:.1f}", f"{bd.queueing_ns:.1f}", f"{bd.sender_wait_ns:.1f}")])
