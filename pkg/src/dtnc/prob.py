"""Emission and transition probabilities over edge fragments.

Emission is proportional to fragment length. Transitions are estimated by
diffusing particles over the network for the elapsed time, with the landing
counts smoothed by a Dirichlet prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from dtnc.netmodel import CellularLocation, EdgeFragment, Network

EVEN = "even"
DIRECTION = "direction"
POLICIES = (EVEN, DIRECTION)

# a breadcrumb is (seconds since departure, edge id, offset along edge)
Breadcrumb = tuple[int, Hashable, float]


class NoCandidatesError(ValueError):
    """Raised when a location has no candidate fragment."""


def emission(R_cl: Sequence[EdgeFragment]) -> dict[EdgeFragment, float]:
    if not R_cl:
        raise NoCandidatesError("empty candidate set")
    total = math.fsum(f.length_m for f in R_cl)
    return {f: f.length_m / total for f in R_cl}


def _normalize_policy(policy: str) -> str:
    p = policy.lower()
    if p.endswith("p"):
        p = p[:-1]
    if p not in POLICIES:
        raise ValueError(f"unknown diffusion policy {policy!r}")
    return p


def prior_mean(
    policy: str,
    R_next: Sequence[EdgeFragment],
    cl_k: CellularLocation | None = None,
    cl_next: CellularLocation | None = None,
    net: Network | None = None,
) -> list[float]:
    """Dirichlet prior mean over ``R_next`` under the even or directional policy."""
    if not R_next:
        raise NoCandidatesError("empty candidate set")
    n = len(R_next)
    if _normalize_policy(policy) == EVEN or cl_k is None or cl_next is None or net is None:
        return [1.0 / n] * n
    (x0, y0), (x1, y1) = net.location_xy(cl_k), net.location_xy(cl_next)
    vx, vy = x1 - x0, y1 - y0
    norm = math.hypot(vx, vy)
    if norm == 0.0:
        return [1.0 / n] * n
    signs = []
    for f in R_next:
        ux, uy = net.edge_direction(f.eid)
        c = (ux * vx + uy * vy) / norm
        signs.append(1 if c > 1e-12 else (-1 if c < -1e-12 else 0))
    pos, neg = signs.count(1), signs.count(-1)
    if pos + neg == 0:
        return [1.0 / n] * n
    alpha = (n - signs.count(0)) / (2.0 * pos + 0.5 * neg)
    weight = {1: 2.0 * alpha / n, 0: 1.0 / n, -1: 0.5 * alpha / n}
    return [weight[s] for s in signs]


def min_travel_time(frag_a: EdgeFragment, frag_b: EdgeFragment, net: Network, v_max: float) -> float:
    """Lower bound on the time to move between fragment centres."""
    return net.network_distance(frag_a.eid, frag_a.p_c, frag_b.eid, frag_b.p_c) / v_max


@dataclass
class Particle:
    eid: Hashable
    offset_m: float
    trace: list[Breadcrumb] = field(default_factory=list)
    alive: bool = True


def advance_particle(
    particle: Particle,
    duration: int,
    net: Network,
    dists,
    rng: np.random.Generator,
    record: bool = True,
) -> Particle:
    """Move ``particle`` for ``duration`` seconds, recording 1 s breadcrumbs.

    On each edge the particle draws a whole-edge travel time, covers the
    rest of the edge at the implied constant speed, then picks an outgoing
    edge uniformly. At a dead end it halts for the remaining time.
    """
    eid, offset = particle.eid, particle.offset_m
    trace = particle.trace
    if record:
        trace.append((0, eid, offset))
    clock = 0.0
    sec = 1
    while True:
        e = net.edges[eid]
        speed = e.length_m / dists[eid].sample(rng)
        t_end = clock + (e.length_m - offset) / speed
        if t_end >= duration:
            if record:
                while sec <= duration:
                    trace.append((sec, eid, min(offset + (sec - clock) * speed, e.length_m)))
                    sec += 1
            offset = min(offset + (duration - clock) * speed, e.length_m)
            break
        if record:
            while sec <= t_end:
                trace.append((sec, eid, min(offset + (sec - clock) * speed, e.length_m)))
                sec += 1
        clock = t_end
        outs = net.out_edges[e.d]
        if not outs:
            offset = e.length_m
            if record:
                while sec <= duration:
                    trace.append((sec, eid, offset))
                    sec += 1
            break
        eid = outs[int(rng.integers(len(outs)))]
        offset = 0.0
    particle.eid, particle.offset_m = eid, offset
    return particle


@dataclass
class TransitionEstimate:
    source: EdgeFragment
    targets: list[EdgeFragment]
    counts: list[int]
    probs: list[float]
    gamma0: float
    prior: list[float]
    n_particles: int
    traces: dict[int, list[list[Breadcrumb]]] = field(default_factory=dict)

    @property
    def n_landed(self) -> int:
        return sum(self.counts)

    def prob(self, target: EdgeFragment) -> float:
        for f, p in zip(self.targets, self.probs):
            if f == target:
                return p
        return 0.0

    def traces_to(self, target: EdgeFragment) -> list[list[Breadcrumb]]:
        for j, f in enumerate(self.targets):
            if f == target:
                return self.traces.get(j, [])
        return []


def smooth_counts(counts: Sequence[int], prior: Sequence[float], gamma0: float) -> list[float]:
    """Posterior-mean transition probabilities ``(N_ij + g*m_j) / (N_i + g)``."""
    n_i = sum(counts)
    denom = n_i + gamma0
    if denom <= 0:
        raise ValueError("no particle landed and gamma0 == 0: probabilities undefined")
    return [(c + gamma0 * m) / denom for c, m in zip(counts, prior)]


def particle_starts(source: EdgeFragment, n_particles: int) -> list[float]:
    step = source.length_m / n_particles
    return [source.p_l + (i + 0.5) * step for i in range(n_particles)]


def simulate_transition(
    source: EdgeFragment,
    R_next: Sequence[EdgeFragment],
    dt: int,
    net: Network,
    dists,
    n_particles: int = 15,
    gamma0: float = 1.0,
    policy: str = EVEN,
    rng_seed=0,
    cl_k: CellularLocation | None = None,
    cl_next: CellularLocation | None = None,
    keep_traces: bool = True,
) -> TransitionEstimate:
    """Estimate transition probabilities from ``source`` to each fragment in ``R_next``."""
    if dt < 0:
        raise ValueError("elapsed time must be non-negative")
    if n_particles < 1:
        raise ValueError("need at least one particle")
    targets = list(R_next)
    prior = prior_mean(policy, targets, cl_k, cl_next, net) if targets else []
    counts = [0] * len(targets)
    traces: dict[int, list[list[Breadcrumb]]] = {}
    rng = np.random.default_rng(rng_seed)
    by_edge: dict[Hashable, list[int]] = {}
    for j, f in enumerate(targets):
        by_edge.setdefault(f.eid, []).append(j)
    for start in particle_starts(source, n_particles):
        par = advance_particle(Particle(source.eid, start), int(dt), net, dists, rng, record=keep_traces)
        for j in by_edge.get(par.eid, ()):
            if targets[j].contains(par.offset_m):
                counts[j] += 1
                if keep_traces:
                    traces.setdefault(j, []).append(par.trace)
                break
    probs = smooth_counts(counts, prior, gamma0) if targets else []
    return TransitionEstimate(source, targets, counts, probs, gamma0, prior, n_particles, traces)
