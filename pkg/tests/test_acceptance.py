"""One test per acceptance criterion; each records a PASS/FAIL line.

The whole file takes tens of minutes on one core, most of it in the
overcommitment search. ``pytest -m "not slow"`` skips the long ones.
"""
import copy
import filecmp

import pytest

from homasim import cli
from homasim.experiment import ExperimentConfig, best_case_time, run_experiment, run_incast
from homasim.fabric import DATA, Topology, WireModel
from homasim.metrics import small_message_tail
from homasim.priority_alloc import SizeDistribution
from homasim.protocol import UNLIMITED, TransportConfig

from conftest import DESK, SMALL, make_cluster

WIRE = WireModel()
PAPER_RTT_NS = 7_800
PAPER_RTT_BYTES = 9_700
PAPER_MIN_ONE_WAY_NS = 2_300
TOL = 0.05


def within(x, target, tol=TOL):
    return abs(x - target) <= tol * target


def test_c1_round_trip(verdict):
    # A two-packet message with one packet of blind data: the second DATA
    # packet reaches the receiver one grant round trip after the first.
    cl = make_cluster(Topology(num_racks=2, hosts_per_rack=2, num_aggr_switches=1),
                      unsched_limit=WIRE.max_payload)
    seen = []
    cl.fabric.tracer = lambda ev, t, p: seen.append(t) if ev == "recv" and p.kind == DATA else None
    cl.send_oneway(0, 2, 2 * WIRE.max_payload)
    cl.sim.run()
    rtt_ns = seen[1] - seen[0]
    rtt_bytes = Topology().rtt_bytes(WIRE)
    ok = within(rtt_ns, PAPER_RTT_NS) and within(rtt_bytes, PAPER_RTT_BYTES)
    verdict(1, ok, f"grant round trip {rtt_ns} ns (7800 +-5%), RTTbytes {rtt_bytes} (9700 +-5%)")


def test_c2_minimum_one_way(verdict):
    t = best_case_time(1)
    verdict(2, within(t, PAPER_MIN_ONE_WAY_NS), f"best case for 1 byte {t} ns (2300 +-5%)")


@pytest.fixture(scope="module")
def loaded_w3():
    cfg = ExperimentConfig(topology=DESK, workload="w3", load=0.8, duration_ns=50_000_000,
                           transport=TransportConfig(audit=True))
    return run_experiment(cfg)


@pytest.mark.slow
def test_c3_grant_window(loaded_w3, verdict):
    r = loaded_w3
    window = [v for v in r.violation_log if "window" in v]
    ok = r.violations == 0 and not r.truncated and len(r.completed()) > 10_000
    verdict(3, ok, f"{len(r.completed())} messages, {r.violations} audit violations "
                   f"({len(window)} grant-window), offered {r.offered_load:.3f}")


@pytest.mark.slow
def test_c4_overcommit_and_levels(loaded_w3, verdict):
    r = loaded_w3
    verdict(4, r.violations == 0,
            f"K={r.overcommit}: {r.violations} violations of the active-set, "
            f"distinct-lowest-level and SRPT-head checks")


def short_behind_long(fixed_level):
    """Two long messages share a downlink; a short one arrives later.

    Returns the short message's scheduled packets at the ToR downlink as
    (wait, expected wait, bytes of long messages queued ahead).
    """
    dist = SizeDistribution.from_weights({30_000: 1, 1_000_000: 1, 2_000_000: 1})
    topo = Topology(num_racks=2, hosts_per_rack=4, num_aggr_switches=1)
    cl = make_cluster(topo, dist=dist, fixed_sched_level=fixed_level)
    rx = 4
    port = cl.fabric.tor_down[rx]
    seen = {}
    out = []
    names = {}

    def monitor(p, pkt):
        if pkt.kind == DATA:
            resid = p.busy_until - cl.sim.now if p.busy else 0
            q = p.queue_map[pkt.priority]
            ahead = [x for qq in range(q, len(p.queues)) for x in p.queues[qq]]
            seen[id(pkt)] = (cl.sim.now, resid, ahead)

    sink = port.sink

    def departed(pkt):
        entry = seen.pop(id(pkt), None)
        if entry and names.get(pkt.rpc_id) == "short" and pkt.offset >= pkt.unsched_bytes:
            arrived, resid, ahead = entry
            start = cl.sim.now - port.ser_ns(pkt.wire_bytes)
            expected = resid + sum(port.ser_ns(x.wire_bytes) for x in ahead)
            long_bytes = sum(x.wire_bytes for x in ahead if names[x.rpc_id] != "short")
            out.append((start - arrived, expected, long_bytes))
        sink(pkt)

    port.monitor = monitor
    port.sink = departed
    names[cl.send_oneway(0, rx, 2_000_000)] = "long"
    cl.sim.schedule(20_000, lambda: names.__setitem__(cl.send_oneway(1, rx, 1_000_000), "long"))
    cl.sim.schedule(120_000, lambda: names.__setitem__(cl.send_oneway(2, rx, 30_000), "short"))
    cl.sim.run()
    return out


def test_c5_preemption_lag(verdict):
    dyn = short_behind_long(None)
    fixed = short_behind_long(0)
    dyn_ok = bool(dyn) and all(lb == 0 for _, _, lb in dyn)
    fixed_exact = bool(fixed) and all(w == e for w, e, _ in fixed)
    fixed_behind = all(lb > 0 for _, _, lb in fixed)
    ok = dyn_ok and fixed_exact and fixed_behind
    verdict(5, ok, f"dynamic: {len(dyn)} packets, none behind long bytes, worst wait "
                   f"{max(w for w, _, _ in dyn)} ns; same level: waits equal residual + buffered "
                   f"serialization ({fixed[0][0]} ns for {fixed[0][2]} B ahead)")


def overcommit_tree(values):
    tree = cli.default_tree()
    tree["topology"].update(num_racks=4, hosts_per_rack=4, num_aggr_switches=1)
    tree["workload"].update(cdf="w4", duration_ms=60.0)
    tree["max_load"].update(step=0.05, low=0.30, high=0.95)
    tree["sweep"] = {"param": "transport.overcommit", "values": values}
    return tree


@pytest.fixture(scope="module")
def overcommit_search():
    return cli.sweep_max_load(overcommit_tree([1, 2, 4, 7]))


@pytest.mark.slow
def test_c6_overcommit_trend(overcommit_search, verdict):
    loads = [r.max_load for r in overcommit_search]
    increasing = all(a < b for a, b in zip(loads, loads[1:]))
    ok = increasing and 0.55 <= loads[0] <= 0.70 and loads[-1] > 0.80
    verdict(6, ok, "max sustainable load K=1,2,4,7: " + ", ".join(f"{x:.2f}" for x in loads)
            + " (need strictly increasing, K=1 in [0.55, 0.70], K=7 > 0.80)")


@pytest.mark.slow
def test_c7_priority_count(verdict):
    tails = {}
    for p in (1, 2, 4, 8):
        r = run_experiment(ExperimentConfig(topology=DESK, workload="w1", load=0.8,
                                            duration_ns=4_000_000, network_priorities=p))
        tails[p], _ = small_message_tail(r.records, r.dist, r.oracle, r.warmup_ns)
    ok = tails[8] <= tails[4] <= tails[2] <= tails[1] and tails[1] / tails[8] >= 1.5
    verdict(7, ok, "p99 slowdown of smallest decile: "
            + ", ".join(f"P{p}={t:.2f}" for p, t in tails.items())
            + f", P1/P8={tails[1] / tails[8]:.2f} (need >= 1.5)")


@pytest.mark.slow
def test_c8_buffer_occupancy(loaded_w3, verdict):
    r = loaded_w3
    lv = r.level_summary
    rtt = r.config.rtt_bytes
    core = max(lv["tor_up"]["mean_bytes"], lv["aggr_down"]["mean_bytes"])
    down = lv["tor_down"]
    bound = (r.overcommit + 10) * rtt
    ok = core < down["mean_bytes"] and down["max_bytes"] <= bound
    verdict(8, ok, f"mean core {core:.0f} B < mean ToR->host {down['mean_bytes']:.0f} B; "
                   f"max ToR->host {down['max_bytes']} B <= {bound} B")


@pytest.mark.slow
def test_c9_wasted_bandwidth(overcommit_search, verdict):
    bad = [(r.label, load, waste) for r in overcommit_search
           for load, ok, offered, waste in r.probes if ok and waste > 1 - offered]
    unlimited = run_experiment(ExperimentConfig(
        topology=DESK, workload="w4", load=0.6, duration_ns=20_000_000,
        transport=TransportConfig(overcommit=UNLIMITED)))
    probes = sum(len(r.probes) for r in overcommit_search)
    ok = not bad and unlimited.waste == 0.0
    verdict(9, ok, f"{probes} probes, waste above 1-load at sustainable points: {bad or 'none'}; "
                   f"waste with unlimited K = {unlimited.waste}")


def test_c10_loss_recovery(verdict):
    topo = Topology(num_racks=4, hosts_per_rack=4, num_aggr_switches=1, loss_rate=0.01)
    r = run_experiment(ExperimentConfig(
        topology=topo, workload="w3", load=0.5, mode="rpc", duration_ns=4_000_000,
        drain_ns=20_000_000, transport=TransportConfig(carry_payload=True, resend_timeout_ns=500_000)))
    total = len(r.records)
    done = len(r.completed())
    frac = done / total

    # Directed: the server forgets the RPC after receiving the request.
    cl = make_cluster(SMALL, rpc=True, carry_payload=True, resend_timeout_ns=200_000)
    srv = cl.transports[2]
    send = srv.send_response

    def lose_first(rpc_id, client, length, flag, payload=None):
        if cl.executions[rpc_id] == 1:
            srv.forget_rpc(rpc_id)
            return
        send(rpc_id, client, length, flag, payload)

    srv.send_response = lose_first
    rid = cl.send_rpc(0, 2, 20_000, 20_000)
    cl.sim.run()
    directed = (cl.collector.records[rid].completed and cl.executions[rid] == 2
                and cl.transports[0].stats.restarts == 1 and cl.payload_mismatches == 0)
    ok = (frac >= 0.999 and r.payload_mismatches == 0
          and r.payload_checked > 0 and r.loss_drops > 0 and directed)
    verdict(10, ok, f"{done}/{total} RPCs complete ({frac:.4%}), {len(r.aborted())} aborted, "
                    f"{r.loss_drops} packets lost, {r.payload_checked} payloads checked, "
                    f"{r.payload_mismatches} mismatched; unknown-RPC restart path ok={directed}")


@pytest.mark.slow
def test_c11_incast(verdict):
    on = run_incast(Topology(), WIRE, TransportConfig(), 1000)
    limit = 1000 * TransportConfig().incast_unsched_limit
    onset = None
    for fanout in (50, 100, 150, 200, 300, 500, 1000):
        off = run_incast(Topology(), WIRE, TransportConfig(incast_control=False), fanout)
        if off.drops:
            onset = fanout
            break
    ok = (on.drops == 0 and on.completed == 1000 and on.flagged_unsched_bytes <= limit
          and onset is not None)
    verdict(11, ok, f"control on: {on.drops} drops, flagged unscheduled {on.flagged_unsched_bytes}"
                    f" B <= {limit} B; control off: drops first at fanout {onset}")


def test_c12_determinism(tmp_path, verdict):
    tree = cli.default_tree()
    tree["topology"].update(num_racks=4, hosts_per_rack=4, num_aggr_switches=1)
    tree["workload"].update(cdf="w3", load=0.8, duration_ms=3.0)
    tree["seeds"] = [7]
    a, b = tmp_path / "a", tmp_path / "b"
    cli.run_all(copy.deepcopy(tree), a)
    cli.run_all(copy.deepcopy(tree), b)
    files = sorted(p.name for p in (a / "seed=7").glob("*.csv"))
    _, mismatch, errors = filecmp.cmpfiles(a / "seed=7", b / "seed=7", files, shallow=False)
    verdict(12, len(files) >= 6 and not mismatch and not errors,
            f"{len(files)} CSV files compared byte for byte, differing: {mismatch or 'none'}")
