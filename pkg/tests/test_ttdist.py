import math
import time

import numpy as np
import pytest

from dtnc.netmodel import Edge, EdgeFragment, EdgeType
from dtnc.ttdist import (
    DistributionStore,
    StationaryError,
    TravelTimeDistribution,
    TravelTimeSample,
    hoeffding_range,
    init_distribution,
    measure_travel_time,
    narrow,
    update_distribution,
)

EXAMPLE_TIMES = [(12, 1), (15, 2), (20, 4), (23, 10), (25, 15), (35, 2), (40, 2)]


def edge(length=100.0, limit=10.0, eid=1):
    return Edge(eid, 0, 1, EdgeType.TRUNK, length, limit)


def reference_narrow(pairs, eps, delta):
    """Literal reading of the endpoint-removal rules over an expanded list."""
    values = sorted(t for t, c in pairs for _ in range(c))
    while True:
        support = sorted(set(values))
        if len(support) <= 2:
            break
        t_l, t_l2, t_r2, t_r = support[0], support[1], support[-2], support[-1]
        without_l = [v for v in values if v != t_l]
        without_r = [v for v in values if v != t_r]
        r_l = math.sqrt(2 * len(without_l) * eps**2 / math.log(1 / delta))
        r_r = math.sqrt(2 * len(without_r) * eps**2 / math.log(1 / delta))
        if abs(t_l2 - t_l) > abs(t_r - t_r2) and (t_r - t_l2) > r_l:
            values = without_l
        elif abs(t_l2 - t_l) <= abs(t_r - t_r2) and (t_r2 - t_l) > r_r:
            values = without_r
        else:
            break
    return sorted((t, values.count(t)) for t in set(values))


def test_hoeffding_values():
    assert hoeffding_range(34, 1, 0.05) == pytest.approx(4.764, abs=1e-3)
    assert hoeffding_range(36, 1, 0.05) == pytest.approx(4.90, abs=1e-2)
    assert hoeffding_range(1, 1, math.exp(-2)) == pytest.approx(1.0)
    # the radicand for n=20 is ~13.35, the range itself ~3.65
    assert 2 * 20 / math.log(20) == pytest.approx(13.35, abs=0.01)
    assert hoeffding_range(20, 1, 0.05) == pytest.approx(3.654, abs=1e-3)


def test_narrow_worked_example():
    assert narrow(EXAMPLE_TIMES, 1, 0.05) == [(20, 4), (23, 10), (25, 15)]


def test_update_worked_example():
    dist = update_distribution(None, [t for t, c in EXAMPLE_TIMES for _ in range(c)], 1, 0.05)
    assert dist.entries == [(20, 4), (23, 10), (25, 15)]
    assert dist.probabilities() == pytest.approx([0.138, 0.345, 0.517], abs=1e-3)
    assert dist.expected_mean() == pytest.approx(23.62, abs=0.01)


def test_narrow_edge_cases():
    assert narrow([(30, 7)], 1, 0.05) == [(30, 7)]
    assert narrow([(10, 1), (90, 1)], 1, 0.05) == [(10, 1), (90, 1)]
    # symmetric gaps remove the right endpoint first
    assert narrow([(0, 1), (10, 50), (20, 1)], 1, 0.05)[-1][0] == 10


def test_narrow_matches_reference_on_random_multisets():
    rng = np.random.default_rng(11)
    for _ in range(50):
        k = int(rng.integers(1, 12))
        support = sorted(set(int(t) for t in rng.integers(5, 80, size=k)))
        pairs = [(t, int(rng.integers(1, 20))) for t in support]
        eps = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        delta = float(rng.choice([0.01, 0.05, 0.2]))
        got = narrow(pairs, eps, delta)
        assert got == reference_narrow(pairs, eps, delta)
        # properties: extremes shrink, interior kept, count never grows
        assert got[0][0] >= support[0] and got[-1][0] <= support[-1]
        kept = {t for t, _ in got}
        assert kept == {t for t in support if got[0][0] <= t <= got[-1][0]}
        assert sum(c for _, c in got) <= sum(c for _, c in pairs)


def test_update_properties():
    rng = np.random.default_rng(5)
    dist = TravelTimeDistribution([(20, 3), (22, 5)])
    for _ in range(20):
        batch = (rng.normal(21, 3, size=int(rng.integers(1, 10)))).clip(1).tolist()
        dist = update_distribution(dist, batch, 2.0, 0.05)
        assert math.fsum(dist.probabilities()) == pytest.approx(1.0, abs=1e-12)


def test_update_empty_batch_is_identity():
    d = TravelTimeDistribution(EXAMPLE_TIMES)
    assert update_distribution(d, [], 1, 0.05) is d


def test_streaming_equals_combined_without_narrowing():
    base = TravelTimeDistribution([(20, 5), (21, 5)])
    a = [TravelTimeSample(1, 19.5), TravelTimeSample(1, 20.2)]
    b = [TravelTimeSample(1, 20.7), TravelTimeSample(1, 19.1)]
    streamed = update_distribution(update_distribution(base, a, 2, 0.05), b, 2, 0.05)
    combined = update_distribution(base, a + b, 2, 0.05)
    assert streamed == combined == TravelTimeDistribution([(20, 7), (21, 7)])


def test_sampling_frequencies():
    dist = TravelTimeDistribution([(20, 4), (23, 10), (25, 15)])
    rng = np.random.default_rng(0)
    draws = np.array([dist.sample(rng) for _ in range(100_000)])
    freqs = [(draws == t).mean() for t in (20, 23, 25)]
    assert freqs == pytest.approx([4 / 29, 10 / 29, 15 / 29], abs=0.01)
    single = TravelTimeDistribution([(42, 3)])
    assert {single.sample(rng) for _ in range(50)} == {42}
    assert single.expected_mean() == 42


def test_init_distribution_bounds_and_seed():
    d = init_distribution(edge(100, 10), 500, rng_seed=3)
    assert d.times[0] >= 10 and d.times[-1] <= 100
    one = init_distribution(edge(100, 10), 1, rng_seed=9)
    assert len(one) == 1 and one.probabilities() == [1.0]
    assert init_distribution(edge(), 50, 4) == init_distribution(edge(), 50, 4)


def _ceil_mean_oracle(length, lo, hi):
    # E[ceil(L/S)], S ~ U(lo, hi): P(ceil = k) = P(L/k <= S < L/(k-1))
    total = 0.0
    k_min, k_max = math.ceil(length / hi), math.ceil(length / lo)
    for k in range(k_min, k_max + 1):
        s_hi = hi if k == k_min else min(hi, length / (k - 1))
        s_lo = max(lo, length / k)
        if s_hi > s_lo:
            total += k * (s_hi - s_lo) / (hi - lo)
    return total


def test_init_distribution_mean_oracle():
    expected = _ceil_mean_oracle(100.0, 1.0, 10.0)
    assert 100 * math.log(10) / 9 < expected < 100 * math.log(10) / 9 + 1
    d = init_distribution(edge(100, 10), 1000, rng_seed=1)
    assert abs(d.expected_mean() - expected) <= 0.05 * expected


def test_measure_travel_time_formula():
    e = edge(100)
    s = measure_travel_time(EdgeFragment(1, 0, 20), 0, EdgeFragment(1, 50, 70), 10, e)
    assert s.t_e == pytest.approx(20.0)
    with pytest.raises(StationaryError):
        measure_travel_time(EdgeFragment(1, 0, 20), 0, EdgeFragment(1, 0, 20), 10, e)
    with pytest.raises(StationaryError):
        measure_travel_time(EdgeFragment(1, 50, 70), 0, EdgeFragment(1, 0, 20), 10, e)
    with pytest.raises(ValueError):
        measure_travel_time(EdgeFragment(1, 0, 20), 10, EdgeFragment(1, 50, 70), 10, e)


def test_measure_constant_speed_object():
    # 8 m/s over a 400 m edge, fixes every 13 s; fragments centred on the fixes
    e = edge(400, 15)
    positions = [8.0 * t for t in range(0, 51, 13)]
    frags = [EdgeFragment(1, max(0.0, p - 30), min(400.0, p + 30)) for p in positions]
    interior = [(k, f) for k, f in enumerate(frags) if f.p_l > 0 and f.p_r < 400]
    for (ka, fa), (kb, fb) in zip(interior, interior[1:]):
        s = measure_travel_time(fa, 13 * ka, fb, 13 * kb, e)
        assert abs(s.t_e - 50.0) <= 1.0


def test_store_rounds_and_json(tmp_path):
    store = DistributionStore({1: TravelTimeDistribution([(10, 2)]), "x": TravelTimeDistribution([(5, 1)])})
    used = store.apply_updates([TravelTimeSample(1, 9.4), TravelTimeSample(1, 11.0)], 2, 0.05)
    assert used == {1: 2} and store.rounds == 1
    assert store[1].entries == [(10, 3), (11, 1)]
    path = tmp_path / "d.json"
    store.save(path)
    again = DistributionStore.load(path)
    assert again.rounds == 1 and again[1] == store[1] and again["x"] == store["x"]


def test_snapshot_isolation():
    store = DistributionStore({1: TravelTimeDistribution([(10, 2)])})
    snap = store.snapshot()
    store.apply_updates([TravelTimeSample(1, 30.0)], 2, 0.05)
    assert snap[1].entries == [(10, 2)]


def test_narrow_runtime():
    t0 = time.perf_counter()
    for _ in range(100):
        narrow(EXAMPLE_TIMES, 1, 0.05)
    assert (time.perf_counter() - t0) / 100 < 1e-3
