import itertools
import math

import numpy as np
import pytest

from conftest import at, fixed_store, planar_network
from dtnc.netmodel import CellularLocation, Edge, EdgeFragment, EdgeType, retrieve_fragments
from dtnc.motion import (
    INFERRED,
    OBSERVED,
    EdgeSequenceResult,
    TransitionCache,
    duration_prob,
    edge_transition_prob,
    infer_edge_sequence,
    infer_locations,
    initial_durations,
    joint_log_prob,
    scaled_duration,
)
from dtnc.ttdist import TravelTimeDistribution


def edge(length, eid="e"):
    return Edge(eid, 0, 1, EdgeType.TRUNK, float(length), 10.0)


def test_scaled_duration_examples():
    # 30 s edge of 300 m, fragment centred 10 m before the end -> 1 s left
    assert scaled_duration(30, edge(300), EdgeFragment("e", 280, 300)) == 1
    # 40 s edge, centre at 75 % -> 10 s left
    assert scaled_duration(40, edge(100), EdgeFragment("e", 50, 100)) == 10
    # exact halves round up
    assert scaled_duration(10, edge(100), EdgeFragment("e", 50, 100)) == 3
    assert scaled_duration(10, edge(100), EdgeFragment("e", 0, 10)) == 10


def test_initial_durations_sum_to_one():
    dist = TravelTimeDistribution([(20, 1), (21, 1), (40, 2)])
    d = initial_durations(edge(100), EdgeFragment("e", 0, 100), dist)
    # centre 50: 10, 10.5 -> 11, 20
    assert d == {10: 0.25, 11: 0.25, 20: 0.5}
    assert math.fsum(d.values()) == 1.0
    f = EdgeFragment("e", 0, 100)
    assert duration_prob(0, 20, edge(100), f, 5, dist) == 0.5
    assert duration_prob(30, 25, edge(100), f, 5, dist) == 1.0
    assert duration_prob(30, 24, edge(100), f, 5, dist) == 0.0
    assert duration_prob(3, 20, edge(100), f, 5, dist) == 0.0


def test_edge_transition_prob():
    a, b, a2 = EdgeFragment(1, 0, 10), EdgeFragment(2, 0, 10), EdgeFragment(1, 50, 60)
    table = {a2: 0.3, b: 0.7}
    # remaining duration covers the gap: stay on the edge
    assert edge_transition_prob(a, a2, 10, 10, table) == 1.0
    assert edge_transition_prob(a, b, 10, 10, table) == 0.0
    # otherwise the transition estimate decides, self-transitions included
    assert edge_transition_prob(a, b, 9, 10, table) == 0.7
    assert edge_transition_prob(a, a2, 0, 10, table) == 0.3
    calls = []

    def lazy():
        calls.append(1)
        return table

    assert edge_transition_prob(a, a2, 20, 10, lazy) == 1.0 and not calls
    assert edge_transition_prob(a, b, 2, 10, lazy) == 0.7 and calls == [1]


def _random_instance(rng, net, eids):
    n = int(rng.integers(1, 5))
    sets = []
    for _ in range(n):
        k = int(rng.integers(1, 4))
        picks = rng.choice(len(eids), size=k, replace=False)
        s = []
        for i in picks:
            e = net.edges[eids[int(i)]]
            lo = float(rng.integers(0, int(e.length_m) - 20))
            s.append(EdgeFragment(e.eid, lo, lo + float(rng.integers(5, 20))))
        sets.append(s)
    ts = [0]
    for _ in range(n - 1):
        ts.append(ts[-1] + int(rng.integers(1, 12)))
    table = {eid: [(int(t), int(c)) for t, c in zip(rng.integers(3, 25, size=3), rng.integers(1, 4, size=3))]
             for eid in net.edges}
    dists = fixed_store(net, table)
    probs = {}
    for k in range(1, n):
        for src in sets[k - 1]:
            w = rng.random(len(sets[k])) * (rng.random(len(sets[k])) > 0.2)
            probs[(k, src)] = {f: float(x) for f, x in zip(sets[k], w / w.sum())} if w.sum() else {}
    return sets, ts, dists, lambda k, src: probs[(k, src)]


def _brute_force(sets, ts, net, dists, trans):
    best = -math.inf
    for frags in itertools.product(*sets):
        # durations: any fresh duration of that fragment, or a countdown
        options = [sorted(initial_durations(net.edges[frags[0].eid], frags[0], dists[frags[0].eid]))]
        for k in range(1, len(frags)):
            fresh = set(initial_durations(net.edges[frags[k].eid], frags[k], dists[frags[k].eid]))
            dt = ts[k] - ts[k - 1]
            fresh |= {d - dt for d in options[-1] if d >= dt}
            options.append(sorted(fresh))
        for durs in itertools.product(*options):
            best = max(best, joint_log_prob(frags, durs, sets, ts, net, dists, trans))
    return best


def test_dp_matches_brute_force():
    pts = {0: (0, 0), 1: (80, 0), 2: (80, 80), 3: (0, 80)}
    edges = [(f"e{a}{b}", a, b, "trunk", 10) for a, b in [(0, 1), (1, 2), (2, 3), (3, 0), (1, 0), (2, 1)]]
    net = planar_network(pts, edges)
    eids = sorted(net.edges)
    rng = np.random.default_rng(21)
    nonzero = 0
    for _ in range(200):
        sets, ts, dists, trans = _random_instance(rng, net, eids)
        res = infer_edge_sequence(sets, ts, net, dists, trans)
        expected = _brute_force(sets, ts, net, dists, trans)
        if expected == -math.inf:
            assert res.fallback and res.log_prob == -math.inf
            continue
        nonzero += 1
        assert not res.fallback
        assert res.log_prob == pytest.approx(expected, abs=1e-9)
        again = joint_log_prob(res.fragments, res.durations, sets, ts, net, dists, trans)
        assert again == pytest.approx(res.log_prob, abs=1e-9)
    assert nonzero > 150


def test_single_location_picks_longest_fragment():
    pts = {0: (0, 0), 1: (100, 0), 2: (0, 50), 3: (100, 50)}
    net = planar_network(pts, [(1, 0, 1, "trunk", 10), (2, 2, 3, "trunk", 10)])
    dists = fixed_store(net, {1: [(10, 1)], 2: [(10, 1)]})
    a, b = EdgeFragment(1, 0, 40), EdgeFragment(2, 20, 80)
    res = infer_edge_sequence([[a, b]], [0], net, dists, lambda k, s: {})
    assert res.edges == [2]
    with pytest.raises(ValueError):
        infer_edge_sequence([], [], net, dists, lambda k, s: {})
    with pytest.raises(ValueError):
        infer_edge_sequence([[a], []], [0, 1], net, dists, lambda k, s: {})


def test_ties_go_to_lowest_edge_id():
    pts = {0: (0, 0), 1: (100, 0), 2: (0, 50), 3: (100, 50)}
    net = planar_network(pts, [(7, 0, 1, "trunk", 10), (3, 2, 3, "trunk", 10)])
    dists = fixed_store(net, {7: [(10, 1)], 3: [(10, 1)]})
    res = infer_edge_sequence([[EdgeFragment(7, 0, 50), EdgeFragment(3, 0, 50)]], [0], net, dists, lambda k, s: {})
    assert res.edges == [3]


def test_fast_line_beats_parallel_slow_road():
    # a rail line 30 m from a road; the object moves at rail speed (25 m/s)
    pts = {"r0": (0, 0), "r1": (1000, 0), "r2": (2000, 0), "s0": (0, 30), "s1": (1000, 30), "s2": (2000, 30)}
    edges = [("R1", "r0", "r1", "trunk", 15), ("R2", "r1", "r2", "trunk", 15),
             ("S1", "s0", "s1", "subway", 30), ("S2", "s1", "s2", "subway", 30)]
    net = planar_network(pts, edges)
    dists = fixed_store(net, {"R1": [(100, 1)], "R2": [(100, 1)], "S1": [(40, 1)], "S2": [(40, 1)]})
    ts = [0, 20, 40, 60]
    locs = [CellularLocation("o", *at(net, 100 + 25 * t, 15), t, 1) for t in ts]
    sets = [retrieve_fragments(cl, net) for cl in locs]
    assert all({f.eid for f in s} & {"R1", "R2"} for s in sets)
    cache = TransitionCache(sets, ts, net, dists, n_particles=20, seed=3)
    res = infer_edge_sequence(sets, ts, net, dists, cache)
    assert not res.fallback
    assert res.edges == ["S1", "S1", "S2", "S2"]


def test_midpoint_interpolation_without_particles():
    net = planar_network({0: (0, 0), 1: (200, 0)}, [(1, 0, 1, "trunk", 10)])
    frags = [EdgeFragment(1, 0, 40), EdgeFragment(1, 100, 140)]
    res = EdgeSequenceResult(frags, [0, 0], 0.0)
    traj = infer_locations("o", res, [0, 10], (0, 11), net)
    assert len(traj.records) == 11
    assert [r[0] for r in traj.records] == list(range(11))
    assert traj.records[0][3] == OBSERVED and traj.records[10][3] == OBSERVED
    assert all(r[3] == INFERRED for r in traj.records[1:10])
    x5, y5 = net.projection.project(traj.records[5][1], traj.records[5][2])
    cx, cy = net.offset
    assert x5 + cx == pytest.approx(70.0, abs=1e-6)
    assert y5 + cy == pytest.approx(0.0, abs=1e-6)


def test_constant_speed_is_linear_across_edges():
    # centres 160 m apart along a bend, 20 s apart: 8 m per second of route
    pts = {0: (0, 0), 1: (100, 0), 2: (100, 100)}
    net = planar_network(pts, [(1, 0, 1, "trunk", 10), (2, 1, 2, "trunk", 10)])
    frags = [EdgeFragment(1, 10, 30), EdgeFragment(2, 70, 90)]
    res = EdgeSequenceResult(frags, [0, 0], 0.0)
    traj = infer_locations("o", res, [0, 20], (0, 21), net)
    cx, cy = net.offset
    for t, lat, lon, _ in traj.records:
        x, y = net.projection.project(lat, lon)
        x, y = x + cx, y + cy
        # arc length along the route from vertex 0
        s = x if abs(y) < 1e-6 else 100.0 + y
        assert s == pytest.approx(20.0 + 8.0 * t, abs=1e-6)


def test_window_edges_hold_nearest_position():
    net = planar_network({0: (0, 0), 1: (200, 0)}, [(1, 0, 1, "trunk", 10)])
    frags = [EdgeFragment(1, 40, 60), EdgeFragment(1, 90, 110)]
    res = EdgeSequenceResult(frags, [0, 0], 0.0)
    traj = infer_locations("o", res, [5, 8], (0, 12), net)
    lat_first, lat_last = traj.records[5][1:3], traj.records[8][1:3]
    assert all(r[1:3] == lat_first for r in traj.records[:5])
    assert all(r[1:3] == lat_last for r in traj.records[9:])
    # observations outside the window are trimmed and flagged
    out = infer_locations("o", res, [5, 30], (0, 12), net)
    assert len(out.records) == 12 and out.flags


def test_particle_paths_follow_the_network(grid_net):
    from dtnc.ttdist import DistributionStore

    dists = DistributionStore.initial(grid_net, 30, 1)
    e0 = grid_net.edges[0]
    nxt = grid_net.out_edges[e0.d]
    sets = [[EdgeFragment(0, 20.0, 60.0)], [EdgeFragment(e, 0.0, 80.0) for e in nxt]]
    ts = [0, 15]
    cache = TransitionCache(sets, ts, grid_net, dists, n_particles=15, seed=2)
    res = infer_edge_sequence(sets, ts, grid_net, dists, cache)
    traj = infer_locations("o", res, ts, (0, 16), grid_net, cache=cache, rng_seed=5)
    assert len(traj.records) == 16
    # every inferred second lies on edge 0 or one of its successors
    allowed = [0] + list(nxt)
    for t, lat, lon, _ in traj.records:
        x, y = grid_net.projection.project(lat, lon)
        dmin = min(_dist_to_edge(grid_net, e, x, y) for e in allowed)
        assert dmin < 1e-3


def _dist_to_edge(net, eid, x, y):
    e = net.edges[eid]
    (ax, ay), (bx, by) = net.xy[e.s], net.xy[e.d]
    vx, vy = bx - ax, by - ay
    f = max(0.0, min(1.0, ((x - ax) * vx + (y - ay) * vy) / (vx * vx + vy * vy)))
    return math.hypot(ax + f * vx - x, ay + f * vy - y)
