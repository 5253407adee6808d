"""Travel-time-aware hidden semi-Markov model over candidate fragments.

A hidden state at observation ``k`` is a candidate fragment (hence an edge)
together with the remaining travel duration on that edge. While the
remaining duration covers the gap to the next observation the object stays
on its edge and the duration counts down deterministically; otherwise it
moves to a fragment of the next candidate set with the particle-estimated
transition probability and draws a fresh duration from the new edge's
travel-time distribution.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from dtnc.netmodel import CellularLocation, Edge, EdgeFragment, Network
from dtnc.prob import EVEN, TransitionEstimate, emission, simulate_transition
from dtnc.ttdist import TravelTimeDistribution

log = logging.getLogger(__name__)

OBSERVED = "observed_cleansed"
INFERRED = "inferred_missing"

NEG_INF = -math.inf


def _log(p: float) -> float:
    return math.log(p) if p > 0.0 else NEG_INF


def scaled_duration(t: int, edge: Edge, frag: EdgeFragment) -> int:
    """Whole-edge time ``t`` scaled to the distance left from the fragment
    centre, rounded half up to whole seconds."""
    return math.floor(t * (edge.length_m - frag.p_c) / edge.length_m + 0.5)


def initial_durations(edge: Edge, frag: EdgeFragment, dist: TravelTimeDistribution) -> dict[int, float]:
    """Distribution of the remaining duration when entering ``edge`` at ``frag``."""
    out: dict[int, float] = {}
    for t, c in dist.entries:
        j = scaled_duration(t, edge, frag)
        out[j] = out.get(j, 0.0) + c / dist.n
    return out


def duration_prob(i: int, j: int, edge: Edge, frag: EdgeFragment, dt: int, dist: TravelTimeDistribution) -> float:
    if i == 0:
        return initial_durations(edge, frag, dist).get(j, 0.0)
    if i >= dt:
        return 1.0 if j == i - dt else 0.0
    return 0.0


def edge_transition_prob(
    frag_prev: EdgeFragment,
    frag_next: EdgeFragment,
    d_prev: int,
    dt: int,
    transition: Mapping[EdgeFragment, float] | TransitionEstimate | Callable[[], TransitionEstimate],
) -> float:
    """Probability of the next edge given the previous edge and remaining duration.

    ``transition`` may be a mapping target -> probability, an estimate, or a
    zero-argument callable producing one (evaluated only when needed).
    """
    if d_prev >= dt:
        return 1.0 if frag_next.eid == frag_prev.eid else 0.0
    if callable(transition) and not isinstance(transition, Mapping):
        transition = transition()
    if isinstance(transition, TransitionEstimate):
        return transition.prob(frag_next)
    return transition.get(frag_next, 0.0)


def seed_material(*parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, (int, np.integer)) and not isinstance(p, bool):
            out.append(int(p) & 0xFFFFFFFF)
        else:
            out.append(zlib.crc32(repr(p).encode("utf-8")))
    return out


class TransitionCache:
    """Lazily simulated transition estimates for one trajectory.

    ``get(k, source)`` estimates the move from ``source`` (a fragment of set
    ``k - 1``) to the fragments of set ``k``. Each estimate owns an RNG
    stream derived from the base seed, ``k`` and the source fragment, so
    results do not depend on evaluation order.
    """

    def __init__(
        self,
        sets: Sequence[Sequence[EdgeFragment]],
        timestamps: Sequence[int],
        net: Network,
        dists,
        *,
        locations: Sequence[CellularLocation] | None = None,
        n_particles: int = 15,
        gamma0: float = 1.0,
        policy: str = EVEN,
        seed: Sequence[int] | int = 0,
        timings: dict | None = None,
    ):
        self.sets = sets
        self.timestamps = timestamps
        self.net = net
        self.dists = dists
        self.locations = locations
        self.n_particles = n_particles
        self.gamma0 = gamma0
        self.policy = policy
        self.seed = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
        self.timings = timings
        self._cache: dict[tuple[int, EdgeFragment], TransitionEstimate] = {}

    def _simulate(self, k: int, source: EdgeFragment, keep_traces: bool) -> TransitionEstimate:
        cl_k = cl_next = None
        if self.locations is not None:
            cl_k, cl_next = self.locations[k - 1], self.locations[k]
        return simulate_transition(
            source,
            self.sets[k],
            self.timestamps[k] - self.timestamps[k - 1],
            self.net,
            self.dists,
            n_particles=self.n_particles,
            gamma0=self.gamma0,
            policy=self.policy,
            rng_seed=self.seed + seed_material(k, source.eid, round(source.p_l * 1000)),
            cl_k=cl_k,
            cl_next=cl_next,
            keep_traces=keep_traces,
        )

    def get(self, k: int, source: EdgeFragment) -> TransitionEstimate:
        key = (k, source)
        est = self._cache.get(key)
        if est is None:
            t0 = time.perf_counter()
            est = self._simulate(k, source, keep_traces=False)
            self._cache[key] = est
            if self.timings is not None:
                self.timings["PC"] = self.timings.get("PC", 0.0) + time.perf_counter() - t0
        return est

    def traces(self, k: int, source: EdgeFragment, target: EdgeFragment) -> list:
        """Breadcrumb traces of the particles that moved from ``source`` into
        ``target``; re-runs the seeded simulation, so counts match ``get``."""
        return self._simulate(k, source, keep_traces=True).traces_to(target)

    def probs(self, k: int, source: EdgeFragment) -> dict[EdgeFragment, float]:
        est = self.get(k, source)
        return dict(zip(est.targets, est.probs))


@dataclass
class EdgeSequenceResult:
    fragments: list[EdgeFragment]
    durations: list[int]
    log_prob: float
    fallback: bool = False

    @property
    def edges(self) -> list[Hashable]:
        return [f.eid for f in self.fragments]


TransitionFn = Callable[[int, EdgeFragment], Mapping[EdgeFragment, float]]


def infer_edge_sequence(
    sets: Sequence[Sequence[EdgeFragment]],
    timestamps: Sequence[int],
    net: Network,
    dists,
    transitions: TransitionFn | TransitionCache,
) -> EdgeSequenceResult:
    """Most probable fragment/edge sequence by max-product dynamic programming.

    ``transitions(k, source)`` returns the transition probabilities from a
    fragment of set ``k - 1`` into set ``k``; it is only invoked for sources
    that have a state whose remaining duration forces a transition.
    All arithmetic is in log space; ties go to the lowest edge id.
    """
    n = len(sets)
    if n == 0:
        raise ValueError("need at least one location")
    if any(len(s) == 0 for s in sets):
        raise ValueError("every location needs a non-empty candidate set")
    if isinstance(transitions, TransitionCache):
        transitions = transitions.probs

    sets = [sorted(s, key=EdgeFragment.sort_key) for s in sets]
    log_em = [[_log(p) for p in emission(s).values()] for s in sets]
    log_dur_cache: dict[EdgeFragment, list[tuple[int, float]]] = {}

    def log_durs(f: EdgeFragment) -> list[tuple[int, float]]:
        got = log_dur_cache.get(f)
        if got is None:
            got = [(d, _log(p)) for d, p in sorted(initial_durations(net.edges[f.eid], f, dists[f.eid]).items())]
            log_dur_cache[f] = got
        return got

    # V[k]: (fragment index, duration) -> (log prob, back state); states are
    # visited in (edge id, duration) order and only a strictly better score
    # replaces an earlier one, which fixes the tie-break
    log_prior = _log(1.0 / len(sets[0]))
    V: list[dict] = [{}]
    for i, f in enumerate(sets[0]):
        base = log_prior + log_em[0][i]
        for d, lp in log_durs(f):
            V[0][(i, d)] = (base + lp, None)

    for k in range(1, n):
        dt = timestamps[k] - timestamps[k - 1]
        prev_sets = sets[k - 1]
        cur_set = sets[k]
        index_of = {f.eid: j for j, f in enumerate(cur_set)}
        cur: dict = {}
        best_moving: dict[int, tuple[float, tuple]] = {}
        for state in sorted(V[k - 1]):
            lp = V[k - 1][state][0]
            if lp == NEG_INF:
                continue
            i, d_prev = state
            if d_prev >= dt:
                j = index_of.get(prev_sets[i].eid)
                if j is not None:
                    score = lp + log_em[k][j]
                    key = (j, d_prev - dt)
                    old = cur.get(key)
                    if old is None or score > old[0]:
                        cur[key] = (score, state)
            else:
                old = best_moving.get(i)
                if old is None or lp > old[0]:
                    best_moving[i] = (lp, state)

        # best predecessor per target; the duration terms do not depend on it
        entry: list[tuple[float, tuple] | None] = [None] * len(cur_set)
        for i in sorted(best_moving):
            lp, back = best_moving[i]
            trans = transitions(k, prev_sets[i])
            for j, f in enumerate(cur_set):
                lt = _log(trans.get(f, 0.0))
                if lt == NEG_INF:
                    continue
                score = lp + lt
                if entry[j] is None or score > entry[j][0]:
                    entry[j] = (score, back)
        for j, f in enumerate(cur_set):
            if entry[j] is None:
                continue
            score, back = entry[j]
            for d, ld in log_durs(f):
                total = score + ld + log_em[k][j]
                key = (j, d)
                old = cur.get(key)
                if old is None or total > old[0]:
                    cur[key] = (total, back)
        V.append(cur)

    best_state, best_lp = None, NEG_INF
    for state in sorted(V[-1]):
        lp = V[-1][state][0]
        if lp > best_lp:
            best_state, best_lp = state, lp
    if best_state is None:
        log.warning("all paths have zero probability; falling back to max-emission assignment")
        frags = [_max_emission(s) for s in sets]
        return EdgeSequenceResult(frags, [0] * n, NEG_INF, fallback=True)

    frags, durs = [None] * n, [0] * n
    state = best_state
    for k in range(n - 1, -1, -1):
        frags[k], durs[k] = sets[k][state[0]], state[1]
        state = V[k][state][1]
    return EdgeSequenceResult(frags, durs, best_lp)


def _max_emission(frags: Sequence[EdgeFragment]) -> EdgeFragment:
    best = frags[0]
    for f in frags[1:]:
        if f.length_m > best.length_m:
            best = f
    return best


def joint_log_prob(
    frags: Sequence[EdgeFragment],
    durations: Sequence[int],
    sets: Sequence[Sequence[EdgeFragment]],
    timestamps: Sequence[int],
    net: Network,
    dists,
    transitions: TransitionFn,
) -> float:
    """Log joint probability of locations and one state path, factorised as
    prior x emission x duration x edge-transition terms."""
    n = len(frags)
    ems = [emission(s) for s in sets]
    f0 = frags[0]
    total = _log(1.0 / len(sets[0])) + _log(ems[0][f0])
    total += _log(duration_prob(0, durations[0], net.edges[f0.eid], f0, 0, dists[f0.eid]))
    for k in range(1, n):
        dt = timestamps[k] - timestamps[k - 1]
        fp, dp, f, d = frags[k - 1], durations[k - 1], frags[k], durations[k]
        pe = edge_transition_prob(fp, f, dp, dt, lambda: transitions(k, fp))
        i = dp if dp >= dt else 0
        pd = duration_prob(i, d, net.edges[f.eid], f, dt, dists[f.eid])
        total += _log(pe) + _log(pd) + _log(ems[k][f])
        if total == NEG_INF:
            return NEG_INF
    return total


@dataclass
class CleanedTrajectory:
    object_id: str
    records: list[tuple[int, float, float, str]]
    fragments: list[EdgeFragment] = field(default_factory=list)
    timestamps: list[int] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def edges(self) -> list[Hashable]:
        return [f.eid for f in self.fragments]


def _path_segments(net: Network, fa: EdgeFragment, fb: EdgeFragment):
    """Shortest directed route between fragment centres as (eid, from, to) pieces."""
    a, b = fa.p_c, fb.p_c
    if fa.eid == fb.eid and b >= a:
        return [(fa.eid, a, b)]
    ea, eb = net.edges[fa.eid], net.edges[fb.eid]
    mid = net.vertex_path(ea.d, eb.s)
    if mid is None:
        return None
    return [(fa.eid, a, ea.length_m)] + [(eid, 0.0, net.edges[eid].length_m) for eid in mid] + [(fb.eid, 0.0, b)]


def _point_along(net: Network, segments, dist: float) -> tuple[float, float]:
    for eid, lo, hi in segments:
        span = hi - lo
        if dist <= span:
            return net.edge_xy(eid, lo + dist)
        dist -= span
    eid, _, hi = segments[-1]
    return net.edge_xy(eid, hi)


def _interpolate(net: Network, fa: EdgeFragment, fb: EdgeFragment, frac: float) -> tuple[float, float]:
    if fa.eid == fb.eid:
        # backward moves on one edge are noise: stay on the edge
        segs = [(fa.eid, fa.p_c, fb.p_c)] if fb.p_c >= fa.p_c else None
        if segs is None:
            return net.edge_xy(fa.eid, fa.p_c + frac * (fb.p_c - fa.p_c))
    else:
        segs = _path_segments(net, fa, fb)
    if segs is None:
        (x0, y0), (x1, y1) = net.edge_xy(fa.eid, fa.p_c), net.edge_xy(fb.eid, fb.p_c)
        return x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
    total = sum(hi - lo for _, lo, hi in segs)
    return _point_along(net, segs, frac * total)


def infer_locations(
    object_id: str,
    result: EdgeSequenceResult,
    timestamps: Sequence[int],
    window: tuple[int, int],
    net: Network,
    cache: TransitionCache | None = None,
    rng_seed=0,
    observed: Sequence[bool] | None = None,
) -> CleanedTrajectory:
    """One position per second of ``window = [start, end)``.

    Observed seconds get the centre of their assigned fragment. Seconds
    between two observations follow one randomly chosen particle that moved
    between the two assigned fragments; without such a particle, a constant
    speed walk along the shortest route between the centres is used.
    Seconds before the first or after the last observation hold the nearest
    cleansed position. ``observed[k]`` False marks context anchors outside
    the window.
    """
    start, end = window
    frags = result.fragments
    n = len(frags)
    if observed is None:
        observed = [True] * n
    rng = np.random.default_rng(rng_seed)
    centres = [net.edge_xy(f.eid, f.p_c) for f in frags]
    positions: dict[int, tuple[tuple[float, float], str]] = {}
    flags = []
    for k in range(n):
        t = timestamps[k]
        if start <= t < end:
            positions[t] = (centres[k], OBSERVED if observed[k] else INFERRED)
        elif observed[k]:
            flags.append(f"trimmed observation at t={t}")
            log.warning("object %s: observation at t=%d outside window", object_id, t)

    for k in range(n - 1):
        t0, t1 = timestamps[k], timestamps[k + 1]
        if t1 - t0 < 2 or t1 <= start or t0 >= end - 1:
            continue
        traces = cache.traces(k + 1, frags[k], frags[k + 1]) if cache is not None else []
        trace = traces[int(rng.integers(len(traces)))] if traces else None
        for t in range(max(t0 + 1, start), min(t1, end)):
            if trace is not None:
                _, eid, off = trace[t - t0]
                xy = net.edge_xy(eid, off)
            else:
                xy = _interpolate(net, frags[k], frags[k + 1], (t - t0) / (t1 - t0))
            positions[t] = (xy, INFERRED)

    records = []
    for t in range(start, end):
        got = positions.get(t)
        if got is None:
            k = 0 if t < timestamps[0] else n - 1
            got = (centres[k], INFERRED)
        (x, y), prov = got
        lat, lon = net.projection.unproject(x, y)
        records.append((t, lat, lon, prov))
    return CleanedTrajectory(object_id, records, list(frags), list(timestamps), flags)
