import random

import pytest
from scipy import stats

from homasim.fabric import WireModel
from homasim.priority_alloc import SizeDistribution
from homasim.workload import (MessageSource, WorkloadSpec, calibrate_rate, goodput_bytes,
                              make_sources, message_packets, packaged_cdf, payload_for,
                              resolve_cdf, rpc_mode_issue)

WIRE = WireModel()


def test_packaged_names_and_headers():
    for name in ("w1", "W2", "approx-w3"):
        d = resolve_cdf(name)
        assert d.name.startswith("approx-W")
    with pytest.raises(KeyError):
        packaged_cdf("w9")


def test_packet_split_for_fifty_kilobytes():
    assert message_packets(50_000, 9700, WIRE) == (7, 28)
    assert min(50_000, 9700) == 9700 and 50_000 - 9700 == 40_300


def test_goodput_counts_headers_and_one_grant_per_scheduled_packet():
    assert goodput_bytes(1460, 9670, WIRE) == 1460 + 78
    assert goodput_bytes(1, 9670, WIRE) == 79
    u, s = message_packets(20_000, 9670, WIRE)
    assert goodput_bytes(20_000, 9670, WIRE) == 20_000 + (u + s) * 78 + s * 78


def test_rate_for_single_size_workload_matches_closed_form():
    spec = WorkloadSpec(SizeDistribution.single(1460), 0.5)
    rate = calibrate_rate(spec, WIRE, 10_000_000_000, 9670)
    assert rate == pytest.approx(0.5 * 1e10 / (8 * (1460 + 78)))


def test_sizes_follow_the_cdf():
    d = packaged_cdf("w4")
    src = MessageSource(0, 16, d, 1e6, random.Random(2))
    sizes = [src.next_message()[0] for _ in range(100_000)]
    assert sum(sizes) / len(sizes) == pytest.approx(d.mean(), rel=0.05)
    # Discrete KS distance against the step CDF.
    n = len(sizes)
    sizes.sort()
    worst = 0.0
    i = 0
    for s, c in zip(d.sizes, d.cumulative):
        while i < n and sizes[i] <= s:
            i += 1
        worst = max(worst, abs(i / n - c))
    assert worst < 1.63 / n ** 0.5  # KS critical value at p = 0.01


def test_arrivals_are_poisson():
    src = MessageSource(0, 4, SizeDistribution.single(100), 2e5, random.Random(4))
    times = [src.next_message()[2] for _ in range(20_000)]
    gaps = [b - a for a, b in zip([0] + times, times)]
    mean = sum(gaps) / len(gaps)
    assert mean == pytest.approx(5000, rel=0.03)
    assert stats.kstest(gaps, "expon", args=(0, 5000)).pvalue > 0.001


def test_destinations_uniform_and_never_self():
    src = MessageSource(3, 8, SizeDistribution.single(100), 1e6, random.Random(9))
    dsts = [src.next_message()[1] for _ in range(14_000)]
    assert 3 not in dsts
    counts = [dsts.count(h) for h in range(8) if h != 3]
    assert stats.chisquare(counts).pvalue > 0.001


def test_sources_are_seeded_per_host():
    spec = WorkloadSpec(packaged_cdf("w2"), 0.5, seed=7)
    a = [s.next_message() for s in make_sources(spec, 4, 1e5)]
    b = [s.next_message() for s in make_sources(spec, 4, 1e5)]
    assert a == b and len(set(a)) == 4


def test_zero_load_issues_nothing():
    spec = WorkloadSpec(packaged_cdf("w2"), 0.0)
    assert calibrate_rate(spec, WIRE, 10**10, 9670) == 0
    assert make_sources(spec, 2, 0.0)[0].next_message() is None


def test_spec_validation():
    with pytest.raises(ValueError):
        WorkloadSpec(packaged_cdf("w2"), 1.0)
    with pytest.raises(ValueError):
        WorkloadSpec(packaged_cdf("w2"), 0.5, mode="closed")


def test_rpc_issue_round_robin_skips_client():
    batch = rpc_mode_issue(0, [0, 1, 2, 3], 7, 100, 10_000)
    assert [s for s, _, _ in batch] == [1, 2, 3, 1, 2, 3, 1]
    assert all(r == 100 and q == 10_000 for _, r, q in batch)
    with pytest.raises(ValueError):
        rpc_mode_issue(0, [0], 1, 1, 1)


def test_payload_is_deterministic_and_direction_specific():
    assert payload_for(5, 64) == payload_for(5, 64)
    assert payload_for(5, 64) != payload_for(5, 64, response=True)
    assert len(payload_for(9, 3000)) == 3000
