import csv

import pytest

from homasim.metrics import (BREAKDOWN_COLUMNS, COMPLETION_COLUMNS, SPECTRUM_COLUMNS,
                             CompletionRecord, WasteTracker, nearest_rank, priority_usage,
                             slowdown_spectrum, small_message_tail, tail_delay_breakdown,
                             wasted_fraction, write_completions, write_spectrum)
from homasim.priority_alloc import SizeDistribution


def rec(i, size, latency, **kw):
    r = CompletionRecord(i, size, 1000 * i)
    r.finish_ns = r.submit_ns + latency
    for k, v in kw.items():
        setattr(r, k, v)
    return r


def test_nearest_rank_by_hand():
    vals = list(range(1, 101))
    assert nearest_rank(vals, 99) == 99
    assert nearest_rank(vals, 50) == 50
    assert nearest_rank(vals, 100) == 100
    assert nearest_rank([5, 1, 3], 50) == 3  # rank ceil(1.5) = 2
    assert nearest_rank([7], 1) == 7
    with pytest.raises(ValueError):
        nearest_rank([], 50)
    with pytest.raises(ValueError):
        nearest_rank([1], 0)


def test_spectrum_buckets_by_message_count_deciles():
    dist = SizeDistribution.from_weights({s: 1 for s in range(100, 1100, 100)})
    best = lambda size, same_rack: 100  # noqa: E731
    records = [rec(i, 100 * (i % 10 + 1), 100 * (i % 10 + 1)) for i in range(200)]
    buckets = slowdown_spectrum(records, dist, best)
    assert [b.hi for b in buckets] == list(range(100, 1100, 100))
    assert [b.count for b in buckets] == [20] * 10
    assert buckets[3].p50 == buckets[3].p99 == 4.0


def test_spectrum_skips_warmup_aborted_and_unfinished():
    dist = SizeDistribution.single(100)
    best = lambda size, same_rack: 10  # noqa: E731
    rs = [rec(1, 100, 10), rec(2, 100, 50), rec(3, 100, 90, aborted=True)]
    rs.append(CompletionRecord(4, 100, 4000))
    [b] = [x for x in slowdown_spectrum(rs, dist, best, warmup_ns=1500) if x.count]
    assert b.count == 1 and b.p99 == 5.0


def test_small_message_tail_uses_smallest_fraction():
    dist = SizeDistribution.from_weights({10: 1, 20: 9})
    best = lambda size, same_rack: 1  # noqa: E731
    rs = [rec(i, 10, 3) for i in range(10)] + [rec(100 + i, 20, 50) for i in range(90)]
    tail, n = small_message_tail(rs, dist, best)
    assert (tail, n) == (3.0, 10)


def test_waste_tracker_integrates_overlap():
    t = WasteTracker(start_ns=0)
    t.link(0, True)
    t.pressure(100, True)      # idle + withholding from 100
    t.link(250, False)         # busy at 250 -> 150 wasted
    t.link(400, True)          # idle again, still withholding
    t.pressure(450, False)     # +50
    assert t.wasted(1000) == 200
    assert wasted_fraction([t], 0, 1000) == pytest.approx(0.2)


def test_waste_tracker_ignores_time_before_start():
    t = WasteTracker(start_ns=500)
    t.pressure(0, True)
    assert t.wasted(800) == 300


def test_priority_usage_normalises_by_capacity():
    # 2 hosts at 10 Gbps for 1 ms = 2.5 MB of downlink capacity.
    fr = priority_usage([1_250_000, 0, 625_000], 2, 10**10, 1_000_000)
    assert fr == pytest.approx([0.5, 0.0, 0.25])


def test_breakdown_selects_the_tail_and_averages_components():
    dist = SizeDistribution.from_weights({100: 1, 10_000: 4})
    best = lambda size, same_rack: 1000  # noqa: E731
    rs = []
    for i in range(100):
        lat = 1000 + 10 * i
        rs.append(rec(i, 100, lat, lag_ns=4 * i, queue_ns=5 * i, sender_wait_ns=i))
    bd = tail_delay_breakdown(rs, dist, best, fraction=0.2, pct=99)
    assert bd.count == 2
    assert bd.observed_ns == pytest.approx((1980 + 1990) / 2)
    assert bd.residual_ns == pytest.approx(0.0)


def test_csv_columns_are_fixed(tmp_path):
    write_completions(tmp_path / "c.csv", [rec(1, 10, 5)])
    write_spectrum(tmp_path / "s.csv", [])
    with open(tmp_path / "c.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == COMPLETION_COLUMNS == (
        "rpc_id", "size", "submit_ns", "finish_ns", "retx_bytes", "aborted")
    assert rows[1] == ["1", "10", "1000", "1005", "0", "0"]
    with open(tmp_path / "s.csv") as fh:
        assert tuple(next(csv.reader(fh))) == SPECTRUM_COLUMNS
    assert BREAKDOWN_COLUMNS[0] == "count"
