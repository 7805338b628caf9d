import itertools
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_job, make_platform, make_site
from gridweave.errors import ReleaseUnderflow, TimeTravel, UnknownSite
from gridweave.kernel import Engine, EventKind, FlowNetwork, Link, SiteState, compute_duration
from oracles import fluid_completion_times


# -- engine -------------------------------------------------------------------

def test_equal_time_pops_in_schedule_order():
    e = Engine()
    seen = []
    e.on(EventKind.SNAPSHOT_TICK, lambda ev: seen.append(ev.payload))
    e.schedule(5.0, EventKind.SNAPSHOT_TICK, "late")
    e.schedule(1.0, EventKind.SNAPSHOT_TICK, "a")
    e.schedule(1.0, EventKind.SNAPSHOT_TICK, "b")
    e.run()
    assert seen == ["a", "b", "late"]


def test_schedule_at_now_runs_after_earlier_seq():
    e = Engine()
    seen = []

    def h(ev):
        seen.append(ev.payload)
        if ev.payload == "first":
            e.schedule(e.now, EventKind.SNAPSHOT_TICK, "spawned")

    e.on(EventKind.SNAPSHOT_TICK, h)
    e.schedule(2.0, EventKind.SNAPSHOT_TICK, "first")
    e.schedule(2.0, EventKind.SNAPSHOT_TICK, "second")
    e.run()
    assert seen == ["first", "second", "spawned"]


def test_time_travel_rejected():
    e = Engine()
    e.on(EventKind.SNAPSHOT_TICK, lambda ev: None)
    e.schedule(3.0, EventKind.SNAPSHOT_TICK)
    e.run()
    with pytest.raises(TimeTravel):
        e.schedule(2.0, EventKind.SNAPSHOT_TICK)


def test_interleavings_of_equal_time_events_are_fifo():
    # two "handlers" scheduling three equal-time events in every possible order
    for order in itertools.permutations(["x", "y", "z"]):
        e = Engine()
        seen = []
        e.on(EventKind.SNAPSHOT_TICK, lambda ev: seen.append(ev.payload))
        e.on(EventKind.JOB_ARRIVAL, lambda ev: e.schedule(7.0, EventKind.SNAPSHOT_TICK, ev.payload))
        for name in order:
            e.schedule(1.0, EventKind.JOB_ARRIVAL, name)
        e.run()
        assert seen == list(order)


def test_cancelled_events_are_skipped():
    e = Engine()
    seen = []
    e.on(EventKind.SNAPSHOT_TICK, lambda ev: seen.append(ev.payload))
    ev = e.schedule(1.0, EventKind.SNAPSHOT_TICK, "gone")
    e.schedule(2.0, EventKind.SNAPSHOT_TICK, "kept")
    e.cancel(ev)
    assert len(e) == 1
    e.run()
    assert seen == ["kept"]


def test_stop_time_truncates():
    e = Engine()
    e.on(EventKind.SNAPSHOT_TICK, lambda ev: None)
    e.schedule(1.0, EventKind.SNAPSHOT_TICK)
    e.schedule(10.0, EventKind.SNAPSHOT_TICK)
    assert e.run(stop_time_s=5.0) is True
    assert e.now == 5.0
    assert len(e) == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40))
def test_clock_monotone(times):
    e = Engine()
    popped = []
    e.on(EventKind.SNAPSHOT_TICK, lambda ev: popped.append((ev.time_s, ev.seq)))
    for t in times:
        e.schedule(t, EventKind.SNAPSHOT_TICK)
    e.run()
    assert popped == sorted(popped)
    assert len({s for _, s in popped}) == len(popped)


# -- compute -------------------------------------------------------------------------

@pytest.mark.parametrize("work,cores,speed,expected", [
    (3.6e12, 1, 1e9, 3600.0),
    (8e9, 4, 2e9, 1.0),
    (0.0, 3, 1e9, 0.0),
])
def test_compute_duration(work, cores, speed, expected):
    site = make_site("S", cores=8, speed=speed)
    assert compute_duration(make_job(1, work=work, cores=cores), site) == expected


# -- flows ---------------------------------------------------------------------------

def run_flows(bandwidth, latency, opens, links=("L",)):
    """Open flows at given times on one engine; returns completion times by index."""
    e = Engine()
    net = FlowNetwork(e, {name: Link(name, bandwidth, latency) for name in links}, check=True)
    done = {}

    def opener(ev):
        idx, link, nbytes = ev.payload
        net.open_flow(link, nbytes, lambda f, idx=idx: done.__setitem__(idx, e.now))
        assert net.link_rate_sum(link) <= bandwidth * (1 + 1e-12)

    e.on(EventKind.JOB_ARRIVAL, opener)
    for idx, (t, nbytes, *rest) in enumerate(opens):
        link = rest[0] if rest else links[0]
        e.schedule(t, EventKind.JOB_ARRIVAL, (idx, link, nbytes))
    e.run()
    return [done[i] for i in range(len(opens))]


def test_solo_flow_with_latency():
    assert run_flows(1e8, 0.01, [(0.0, 1e8)]) == [pytest.approx(1.01, rel=1e-12)]


def test_simultaneous_pair_shares_equally():
    assert run_flows(1e8, 0.0, [(0.0, 1e8), (0.0, 1e8)]) == [2.0, 2.0]


def test_staggered_pair():
    assert run_flows(1e8, 0.0, [(0.0, 1e8), (0.5, 1e8)]) == [1.5, 2.0]


def test_zero_byte_flow_pays_latency_only():
    assert run_flows(1e8, 0.25, [(1.0, 0.0)]) == [1.25]


def test_unknown_link():
    e = Engine()
    net = FlowNetwork(e, {"A": Link("A", 1.0, 0.0)})
    with pytest.raises(UnknownSite):
        net.open_flow("B", 10)


def test_links_are_independent():
    got = run_flows(1e8, 0.0, [(0.0, 1e8, "A"), (0.0, 1e8, "B")], links=("A", "B"))
    assert got == [1.0, 1.0]


def random_schedule(rng):
    n = rng.randint(1, 12)
    flows = []
    for _ in range(n):
        t = rng.choice([0.0, rng.uniform(0, 5), float(rng.randint(0, 4))])
        size = rng.choice([0.0, rng.uniform(1e6, 5e8), 1e8])
        flows.append((t, size))
    return flows


def test_fluid_matches_independent_integrator_100_schedules():
    rng = random.Random(20240601)
    for _ in range(100):
        bw = rng.choice([1e8, 3.3e7, 1.25e9])
        lat = rng.choice([0.0, 0.01, 0.3])
        flows = random_schedule(rng)
        got = run_flows(bw, lat, flows)
        want = fluid_completion_times(bw, lat, flows)
        for g, w in zip(got, want):
            assert math.isclose(g, w, rel_tol=1e-9, abs_tol=1e-12), (flows, got, want)


# -- reservations ------------------------------------------------------------------------

def test_reserve_and_release():
    s = SiteState(make_site("BNL", hosts=500, cores=8))
    assert s.free_cores == 4000
    assert s.reserve(8, 0, now=0.0)
    assert s.free_cores == 3992
    s.release(8, 0, now=1.0)
    assert s.free_cores == 4000
    assert s.busy_core_seconds == 8.0


def test_reserve_insufficient_leaves_state():
    s = SiteState(make_site("S", cores=4))
    assert not s.reserve(8, 0, now=0.0)
    assert s.free_cores == 4
    assert not s.reserve(1, 1e12, now=0.0)
    assert s.free_cores == 4 and s.free_memory_mb == s.total_memory_mb


def test_release_underflow():
    s = SiteState(make_site("S", cores=4))
    s.reserve(2, 0, now=0.0)
    with pytest.raises(ReleaseUnderflow):
        s.release(3, 0, now=1.0)
