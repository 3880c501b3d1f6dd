import random

import pytest
from hypothesis import given, settings, strategies as st

from homasim.priority_alloc import (DistributionError, OnlineSizeEstimator, SizeDistribution,
                                    allocate, load_cdf, unsched_priority_for, write_cdf)
from homasim.workload import packaged_cdf

RTT = 9670


def oracle_fraction(dist, limit):
    num = sum(min(s, limit) * p for s, p in zip(dist.sizes, dist.probabilities))
    den = sum(s * p for s, p in zip(dist.sizes, dist.probabilities))
    return num / den


def test_unscheduled_fraction_matches_direct_sum():
    for name in ("w1", "w2", "w3", "w4", "w5"):
        d = packaged_cdf(name)
        assert d.unscheduled_fraction(RTT) == pytest.approx(oracle_fraction(d, RTT), rel=1e-12)


def test_twice_limit_sized_messages_split_evenly():
    d = SizeDistribution.single(2 * RTT)
    a = allocate(d, RTT, 8)
    assert a.unsched_fraction == pytest.approx(0.5)
    assert (a.unsched_levels, a.sched_levels) == (4, 4)
    # One size cannot be split, so every unscheduled byte uses the top level.
    assert a.cutoffs == ()
    assert unsched_priority_for(2 * RTT, a) == 7


def test_w2_uses_six_unscheduled_levels_and_top_level_ends_near_280():
    a = allocate(packaged_cdf("w2"), RTT, 8)
    assert a.unsched_fraction == pytest.approx(0.80, abs=0.01)
    assert (a.unsched_levels, a.sched_levels) == (6, 2)
    assert a.cutoffs[0] == 280
    assert unsched_priority_for(1, a) == 7
    assert unsched_priority_for(280, a) == 7
    assert unsched_priority_for(281, a) == 6
    assert unsched_priority_for(10**6, a) == a.lowest_unsched


def test_all_unscheduled_workload_gets_every_level():
    d = SizeDistribution.from_weights({100: 1, 1000: 1})
    a = allocate(d, RTT, 8)
    assert a.unsched_levels == 8 and a.sched_levels == 0


def test_heavy_tail_keeps_one_unscheduled_level():
    a = allocate(packaged_cdf("w4"), RTT, 8)
    assert a.unsched_levels == 1 and a.sched_levels == 7


def test_round_half_up_on_exact_half():
    # 1000 and 15000 bytes, one each, limit 2000: F = 3000/16000 = 0.1875,
    # 8F = 1.5 exactly, which rounds up to 2.
    d = SizeDistribution.from_weights({1000: 1, 15000: 1})
    assert oracle_fraction(d, 2000) * 8 == 1.5
    assert allocate(d, 2000, 8).unsched_levels == 2


def test_overrides_win():
    a = allocate(packaged_cdf("w3"), RTT, 8, unsched_levels=3, cutoffs=[5000, 500])
    assert a.unsched_levels == 3 and a.cutoffs == (500, 5000)


def test_cutoffs_balance_unscheduled_bytes_within_boundary_atoms():
    d = packaged_cdf("w1")
    a = allocate(d, RTT, 8)
    per = [0.0] * 8
    for s, p in zip(d.sizes, d.probabilities):
        per[unsched_priority_for(s, a)] += min(s, RTT) * p
    used = [x for x in per if x > 0]
    atom = max(min(s, RTT) * p for s, p in zip(d.sizes, d.probabilities))
    target = sum(per) / len(used)
    # Each level's edges sit on atoms, so it can be off by one atom at each end.
    assert all(abs(x - target) <= atom + 1e-9 for x in used)
    assert max(used) - min(used) <= 2 * atom + 1e-9


@settings(max_examples=80, deadline=None)
@given(st.dictionaries(st.integers(1, 200_000), st.integers(1, 50), min_size=1, max_size=30),
       st.integers(2, 8), st.integers(100, 20_000))
def test_levels_are_monotone_and_in_band(weights, levels, limit):
    d = SizeDistribution.from_weights(weights)
    a = allocate(d, limit, levels)
    assert 1 <= a.unsched_levels <= levels
    assert list(a.cutoffs) == sorted(set(a.cutoffs))
    prev = levels
    for s in d.sizes:
        lvl = unsched_priority_for(s, a)
        assert a.lowest_unsched <= lvl <= a.highest
        assert lvl <= prev
        prev = lvl


def test_cdf_round_trip(tmp_path):
    d = packaged_cdf("w3")
    write_cdf(d, tmp_path / "x.cdf", ["header"])
    back = load_cdf(tmp_path / "x.cdf")
    assert back.sizes == d.sizes
    assert back.cumulative == pytest.approx(d.cumulative)


def test_bad_cdf_reports_line(tmp_path):
    p = tmp_path / "bad.cdf"
    p.write_text("# c\n10 0.5\n5 1.0\n")
    with pytest.raises(DistributionError, match="not strictly increasing"):
        load_cdf(p)
    p.write_text("10 0.5\noops\n")
    with pytest.raises(DistributionError, match=":2:"):
        load_cdf(p)


def test_online_estimate_within_ten_percent_of_offline():
    d = packaged_cdf("w2")
    static = allocate(SizeDistribution.single(100), RTT, 8)
    est = OnlineSizeEstimator(static, interval_ns=1)
    rng = random.Random(5)
    for _ in range(100_000):
        est.observe(d.quantile(rng.random()))
    assert est.maybe_recompute(10)
    online, offline = est.allocation, allocate(d, RTT, 8)
    assert online.unsched_levels == offline.unsched_levels
    assert len(online.cutoffs) == len(offline.cutoffs)
    for a, b in zip(online.cutoffs, offline.cutoffs):
        assert abs(a - b) <= 0.1 * b
    assert online.version == 1


def test_online_recompute_respects_interval():
    static = allocate(SizeDistribution.single(100), RTT, 8)
    est = OnlineSizeEstimator(static, interval_ns=1000)
    assert not est.maybe_recompute(0)
    est.observe(500)
    assert est.maybe_recompute(0)
    assert not est.maybe_recompute(999)
    assert est.maybe_recompute(1000)
