"""Removal of candidate fragments that cannot be part of any feasible
fragment combination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from dtnc.netmodel import EdgeFragment, Network

DEFAULT_V_MAX = 50.0


def feasible(frag_a: EdgeFragment, frag_b: EdgeFragment, dt: float, net: Network, v_max: float) -> bool:
    """Whether some point of ``frag_b`` is reachable from some point of
    ``frag_a`` within ``dt`` seconds at ``v_max``."""
    return net.fragment_gap(frag_a, frag_b) <= v_max * dt


def feasibility_matrix(R_i, R_j, dt, net, v_max) -> list[list[bool]]:
    return [[feasible(a, b, dt, net, v_max) for b in R_j] for a in R_i]


@dataclass
class CandidateSequence:
    sets: list[list[EdgeFragment]]
    timestamps: list[int]
    degraded: bool = False
    degraded_at: list[int] = field(default_factory=list)

    @property
    def compact(self) -> list[bool]:
        return [len(s) == 1 for s in self.sets]

    def compact_ratio(self) -> float:
        if not self.sets:
            return 0.0
        return sum(self.compact) / len(self.sets)


def pairwise_prune(
    R_i: Sequence[EdgeFragment],
    R_next: Sequence[EdgeFragment],
    dt: float,
    net: Network,
    v_max: float = DEFAULT_V_MAX,
) -> tuple[list[EdgeFragment], list[EdgeFragment], bool]:
    """Drop fragments without a feasible partner in the neighbouring set.

    Returns the pruned sets and a flag that is True when pruning would have
    emptied a set; the originals are returned unchanged in that case.
    """
    if dt <= 0:
        raise ValueError("time gap must be positive")
    ok = feasibility_matrix(R_i, R_next, dt, net, v_max)
    keep_i = [a for a, row in zip(R_i, ok) if any(row)]
    keep_next = [b for j, b in enumerate(R_next) if any(row[j] for row in ok)]
    if not keep_i or not keep_next:
        return list(R_i), list(R_next), True
    return keep_i, keep_next, False


def _sweep(sets, oks, alive, forward: bool) -> list[list[bool]]:
    n = len(sets)
    alive = [list(a) for a in alive]
    order = range(1, n) if forward else range(n - 2, -1, -1)
    for k in order:
        if forward:
            ok = oks[k - 1]
            alive[k] = [
                alive[k][j] and any(alive[k - 1][i] and ok[i][j] for i in range(len(sets[k - 1])))
                for j in range(len(sets[k]))
            ]
        else:
            ok = oks[k]
            alive[k] = [
                alive[k][i] and any(alive[k + 1][j] and ok[i][j] for j in range(len(sets[k + 1])))
                for i in range(len(sets[k]))
            ]
    return alive


def sequence_prune(
    candidates: Sequence[Sequence[EdgeFragment]],
    timestamps: Sequence[int],
    net: Network,
    v_max: float = DEFAULT_V_MAX,
    *,
    backward_first: bool = False,
) -> CandidateSequence:
    """Keep exactly the fragments lying on some feasible combination.

    A forward sweep marks fragments reachable from the first set, a backward
    sweep marks those that can still reach the last set; survivors are both.
    """
    sets = [list(s) for s in candidates]
    if len(sets) != len(timestamps):
        raise ValueError("one timestamp per candidate set is required")
    if len(sets) <= 1:
        return CandidateSequence(sets, list(timestamps))
    oks = [
        feasibility_matrix(sets[k], sets[k + 1], timestamps[k + 1] - timestamps[k], net, v_max)
        for k in range(len(sets) - 1)
    ]
    alive = [[True] * len(s) for s in sets]
    for forward in ((False, True) if backward_first else (True, False)):
        alive = _sweep(sets, oks, alive, forward)
    survivors = [[f for f, a in zip(s, keep) if a] for s, keep in zip(sets, alive)]
    if any(not s for s in survivors):
        empty = [k for k, s in enumerate(survivors) if not s]
        return CandidateSequence(sets, list(timestamps), degraded=True, degraded_at=empty)
    return CandidateSequence(survivors, list(timestamps))


def prune_trajectory(
    candidates: Sequence[Sequence[EdgeFragment]],
    timestamps: Sequence[int],
    net: Network,
    v_max: float = DEFAULT_V_MAX,
) -> CandidateSequence:
    """Pairwise pruning over each adjacent pair followed by sequence pruning.

    A pair with no feasible combination at all splits the trajectory; each
    side is sequence-pruned on its own and the result is flagged degraded.
    """
    sets = [list(s) for s in candidates]
    breaks = []
    for k in range(len(sets) - 1):
        a, b, bad = pairwise_prune(sets[k], sets[k + 1], timestamps[k + 1] - timestamps[k], net, v_max)
        if bad:
            breaks.append(k)
        else:
            sets[k], sets[k + 1] = a, b
    out_sets: list[list[EdgeFragment]] = []
    degraded_at = list(breaks)
    start = 0
    for end in breaks + [len(sets) - 1]:
        part = sequence_prune(sets[start : end + 1], timestamps[start : end + 1], net, v_max)
        out_sets.extend(part.sets)
        degraded_at.extend(start + k for k in part.degraded_at)
        start = end + 1
    return CandidateSequence(out_sets, list(timestamps), bool(degraded_at), sorted(set(degraded_at)))


@dataclass(frozen=True)
class CompactPair:
    index: int
    frag_a: EdgeFragment
    frag_b: EdgeFragment
    t_a: int
    t_b: int


def extract_compact_runs(seq: CandidateSequence) -> tuple[list[tuple[int, EdgeFragment]], list[CompactPair], float]:
    """Singleton sets, consecutive same-edge singleton pairs and the compact ratio."""
    singles = [(k, s[0]) for k, s in enumerate(seq.sets) if len(s) == 1]
    pairs = []
    for (k, fa), (k2, fb) in zip(singles, singles[1:]):
        if k2 == k + 1 and fa.eid == fb.eid:
            pairs.append(CompactPair(k, fa, fb, seq.timestamps[k], seq.timestamps[k2]))
    return singles, pairs, seq.compact_ratio()
