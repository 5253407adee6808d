"""Per-edge discrete travel-time distributions and their online update."""

from __future__ import annotations

import bisect
import itertools
import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping

import numpy as np

from dtnc.netmodel import Edge, EdgeFragment, id_key

S_MIN_MPS = 1.0
S_FLOOR_MPS = 0.1


class StationaryError(ValueError):
    """A travel-time measurement implies no forward motion."""


class TravelTimeDistribution:
    """Multiset of integer travel times (seconds) with positive counts."""

    __slots__ = ("times", "counts", "n", "_cdf")

    def __init__(self, entries: Iterable[tuple[int, int]]):
        merged: Counter = Counter()
        for t, c in entries:
            if int(c) != c or c < 1:
                raise ValueError(f"count must be a positive integer, got {c!r}")
            merged[int(t)] += int(c)
        if not merged:
            raise ValueError("distribution needs at least one entry")
        items = sorted(merged.items())
        self.times = tuple(t for t, _ in items)
        self.counts = tuple(c for _, c in items)
        self.n = sum(self.counts)
        self._cdf = None

    @classmethod
    def from_samples(cls, samples: Iterable[int]) -> "TravelTimeDistribution":
        return cls(Counter(int(s) for s in samples).items())

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.times, self.counts))

    @property
    def range(self) -> int:
        return self.times[-1] - self.times[0]

    def prob(self, t: int) -> float:
        i = bisect.bisect_left(self.times, t)
        if i < len(self.times) and self.times[i] == t:
            return self.counts[i] / self.n
        return 0.0

    def probabilities(self) -> list[float]:
        return [c / self.n for c in self.counts]

    def expected_mean(self) -> float:
        return sum(t * c for t, c in zip(self.times, self.counts)) / self.n

    def sample(self, rng: np.random.Generator) -> int:
        if self._cdf is None:
            self._cdf = list(itertools.accumulate(self.counts))
        k = int(rng.integers(self.n))
        return self.times[bisect.bisect_right(self._cdf, k)]

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TravelTimeDistribution):
            return NotImplemented
        return self.times == other.times and self.counts == other.counts

    def __repr__(self) -> str:
        body = ", ".join(f"<{t},{c}>" for t, c in self.entries)
        return f"TravelTimeDistribution({{{body}}})"


@dataclass(frozen=True)
class TravelTimeSample:
    eid: Hashable
    t_e: float
    window_id: int | None = None

    def __post_init__(self):
        if not self.t_e > 0:
            raise ValueError("travel time must be positive")


def init_distribution(
    edge: Edge, n_samples: int = 100, rng_seed=0, s_min: float = S_MIN_MPS
) -> TravelTimeDistribution:
    """Initial distribution from speeds drawn uniformly below the speed limit.

    Speeds are floored at ``s_min`` so travel times stay bounded.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    lo = min(s_min, edge.speed_limit_mps)
    rng = np.random.default_rng(rng_seed)
    speeds = rng.uniform(lo, edge.speed_limit_mps, size=n_samples)
    times = np.maximum(np.ceil(edge.length_m / speeds), 1).astype(int)
    return TravelTimeDistribution.from_samples(times.tolist())


def measure_travel_time(
    frag_a: EdgeFragment,
    t_a: int,
    frag_b: EdgeFragment,
    t_b: int,
    edge: Edge,
    window_id: int | None = None,
    s_floor: float = S_FLOOR_MPS,
) -> TravelTimeSample:
    """Whole-edge travel time implied by two compact fragments on one edge."""
    if not (frag_a.eid == frag_b.eid == edge.eid):
        raise ValueError("fragments must lie on the measured edge")
    if t_b <= t_a:
        raise ValueError("timestamps must increase")
    moved = frag_b.p_c - frag_a.p_c
    if moved < 0:
        raise StationaryError("backward motion along the edge")
    speed = moved / (t_b - t_a)
    if speed < s_floor:
        raise StationaryError(f"speed {speed:.3f} m/s below floor")
    return TravelTimeSample(edge.eid, edge.length_m / speed, window_id)


def hoeffding_range(n: int, epsilon: float, delta: float) -> float:
    """Largest support range for which an ``n``-sample mean is ``epsilon``-accurate
    with confidence ``1 - delta``."""
    if n < 1 or epsilon <= 0 or not 0 < delta < 1:
        raise ValueError("need n >= 1, epsilon > 0 and 0 < delta < 1")
    return math.sqrt(2.0 * n * epsilon * epsilon / math.log(1.0 / delta))


def narrow(
    samples: Mapping[int, int] | Iterable[tuple[int, int]], epsilon: float, delta: float
) -> list[tuple[int, int]]:
    """Trim extreme travel-time values until the Hoeffding range is respected.

    Each round considers the endpoint whose removal shrinks the support most
    (right endpoint on ties) and removes all of its mass, provided the range
    left behind still exceeds the range allowed for the reduced count.
    """
    items = sorted((dict(samples) if isinstance(samples, Mapping) else dict(samples)).items())
    if not items:
        raise ValueError("cannot narrow an empty multiset")
    lo, hi = 0, len(items) - 1
    n = sum(c for _, c in items)
    while hi - lo + 1 > 2:
        t_l, c_l = items[lo]
        t_r, c_r = items[hi]
        t_l2, t_r2 = items[lo + 1][0], items[hi - 1][0]
        gap_l, gap_r = t_l2 - t_l, t_r - t_r2
        if gap_l > gap_r and t_r - t_l2 > hoeffding_range(n - c_l, epsilon, delta):
            lo += 1
            n -= c_l
        elif gap_l <= gap_r and t_r2 - t_l > hoeffding_range(n - c_r, epsilon, delta):
            hi -= 1
            n -= c_r
        else:
            break
    return items[lo : hi + 1]


def update_distribution(
    dist: TravelTimeDistribution | None,
    new_samples: Iterable[TravelTimeSample | float],
    epsilon: float,
    delta: float,
) -> TravelTimeDistribution | None:
    """Merge ceiled new travel times into ``dist`` and narrow the result."""
    fresh = Counter()
    for s in new_samples:
        t = s.t_e if isinstance(s, TravelTimeSample) else float(s)
        fresh[max(1, math.ceil(t))] += 1
    if not fresh:
        return dist
    if dist is not None:
        for t, c in dist.entries:
            fresh[t] += c
    return TravelTimeDistribution(narrow(fresh, epsilon, delta))


def edge_seed(seed: int, eid: Hashable) -> list[int]:
    """Stable seed material for an edge (independent of PYTHONHASHSEED)."""
    return [int(seed), zlib.crc32(repr(eid).encode("utf-8"))]


class DistributionStore:
    """Mapping edge id -> travel-time distribution, with JSON persistence."""

    def __init__(self, dists: Mapping[Hashable, TravelTimeDistribution] | None = None):
        self._d: dict[Hashable, TravelTimeDistribution] = dict(dists or {})
        self.rounds = 0

    @classmethod
    def initial(cls, net, n_samples: int = 100, seed: int = 0) -> "DistributionStore":
        return cls(
            {eid: init_distribution(e, n_samples, edge_seed(seed, eid)) for eid, e in net.edges.items()}
        )

    def __getitem__(self, eid: Hashable) -> TravelTimeDistribution:
        return self._d[eid]

    def __contains__(self, eid: Hashable) -> bool:
        return eid in self._d

    def __len__(self) -> int:
        return len(self._d)

    def items(self):
        return self._d.items()

    def snapshot(self) -> "DistributionStore":
        # distributions themselves are immutable; copying the mapping suffices
        snap = DistributionStore(self._d)
        snap.rounds = self.rounds
        return snap

    def apply_updates(
        self, samples: Iterable[TravelTimeSample], epsilon: float, delta: float
    ) -> dict[Hashable, int]:
        """Batch-apply one window's samples. Returns samples used per edge."""
        by_edge: dict[Hashable, list[TravelTimeSample]] = {}
        for s in samples:
            by_edge.setdefault(s.eid, []).append(s)
        for eid in sorted(by_edge, key=id_key):
            self._d[eid] = update_distribution(self._d.get(eid), by_edge[eid], epsilon, delta)
        self.rounds += 1
        return {eid: len(v) for eid, v in by_edge.items()}

    def to_json(self) -> dict:
        return {
            "rounds": self.rounds,
            "edges": [
                {"eid": eid, "entries": [[t, c] for t, c in d.entries]}
                for eid, d in sorted(self._d.items(), key=lambda kv: id_key(kv[0]))
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DistributionStore":
        recs = obj["edges"] if isinstance(obj, dict) else obj
        store = cls({r["eid"]: TravelTimeDistribution((t, c) for t, c in r["entries"]) for r in recs})
        if isinstance(obj, dict):
            store.rounds = int(obj.get("rounds", 0))
        return store

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "DistributionStore":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))
