"""Windowed cleansing of trajectory streams.

Each service window runs in two phases: every object is cleansed against
an immutable snapshot of the travel-time distributions, then all travel
times measured in the window are applied to the store in one batch.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

from dtnc.motion import (
    INFERRED,
    OBSERVED,
    CleanedTrajectory,
    EdgeSequenceResult,
    TransitionCache,
    infer_edge_sequence,
    infer_locations,
    seed_material,
)
from dtnc.netmodel import CellularLocation, Network, retrieve_fragments
from dtnc.prob import POLICIES, _normalize_policy
from dtnc.pruning import extract_compact_runs, prune_trajectory
from dtnc.ttdist import DistributionStore, StationaryError, TravelTimeSample, measure_travel_time

log = logging.getLogger(__name__)

PHASES = ("DA", "OL", "PC", "IN")
INPUT_FIELDS = ("object_id", "t", "lat", "lon", "u")
OUTPUT_FIELDS = ("object_id", "t", "lat", "lon", "provenance")


class InputError(ValueError):
    """Malformed trajectory input."""


class ConfigError(ValueError):
    """Invalid configuration."""


@dataclass
class Config:
    window_len: int = 70
    n_particles: int = 15
    epsilon: float = 2.0
    delta: float = 0.05
    gamma0: float = 1.0
    v_max: float = 50.0
    policy: str = "even"
    rng_seed: int = 0
    min_fragment_m: float = 1.0
    init_samples: int = 100
    workers: int = 1

    def validate(self) -> "Config":
        for name in ("window_len", "n_particles", "epsilon", "gamma0", "v_max", "min_fragment_m", "init_samples", "workers"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        try:
            self.policy = _normalize_policy(self.policy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        return self


@dataclass
class ServiceWindow:
    window_id: int
    start_t: int
    end_t: int
    buffers: dict[str, list[CellularLocation]] = field(default_factory=dict)
    # last observation before / first observation after the window, per object
    context: dict[str, tuple[CellularLocation | None, CellularLocation | None]] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.end_t - self.start_t


@dataclass
class ObjectResult:
    trajectory: CleanedTrajectory
    samples: list[TravelTimeSample]
    timings: dict[str, float]
    compact_ratio: float = 0.0
    degraded: bool = False


def _zero_timings() -> dict[str, float]:
    return {p: 0.0 for p in PHASES}


def _held_trajectory(object_id: str, locs: Sequence[CellularLocation], window: tuple[int, int]) -> CleanedTrajectory:
    # no location has a candidate fragment: emit raw positions, held between observations
    start, end = window
    records, k = [], 0
    inside = [cl for cl in locs if start <= cl.t < end] or list(locs)
    for t in range(start, end):
        while k + 1 < len(inside) and inside[k + 1].t <= t:
            k += 1
        cl = inside[k]
        records.append((t, cl.lat, cl.lon, OBSERVED if cl.t == t else INFERRED))
    return CleanedTrajectory(object_id, records, flags=["no candidate fragments"])


def cleanse_object(
    object_id: str,
    locs: Sequence[CellularLocation],
    observed: Sequence[bool],
    window: ServiceWindow | tuple[int, int, int],
    net: Network,
    dists,
    config: Config,
) -> ObjectResult:
    """Retrieve, prune, infer and fill one object's locations for one window.

    ``locs`` may include context observations just outside the window
    (``observed[k]`` False); they anchor gaps that straddle the window edge
    and are not emitted.
    """
    if isinstance(window, ServiceWindow):
        window_id, start, end = window.window_id, window.start_t, window.end_t
    else:
        window_id, start, end = window
    timings = _zero_timings()

    t0 = time.perf_counter()
    cands = [retrieve_fragments(cl, net, config.min_fragment_m) for cl in locs]
    keep = [k for k, c in enumerate(cands) if c]
    if not any(observed[k] for k in keep):
        timings["DA"] += time.perf_counter() - t0
        return ObjectResult(_held_trajectory(object_id, locs, (start, end)), [], timings)
    locs = [locs[k] for k in keep]
    observed = [observed[k] for k in keep]
    cands = [cands[k] for k in keep]
    stamps = [cl.t for cl in locs]
    seq = prune_trajectory(cands, stamps, net, config.v_max)
    timings["DA"] += time.perf_counter() - t0

    samples = []
    _, pairs, ratio = extract_compact_runs(seq)
    for pair in pairs:
        if not observed[pair.index + 1]:
            continue
        try:
            samples.append(
                measure_travel_time(pair.frag_a, pair.t_a, pair.frag_b, pair.t_b, net.edges[pair.frag_a.eid], window_id)
            )
        except StationaryError:
            pass

    t1 = time.perf_counter()
    base_seed = seed_material(config.rng_seed, window_id, object_id)
    cache = TransitionCache(
        seq.sets,
        stamps,
        net,
        dists,
        locations=locs,
        n_particles=config.n_particles,
        gamma0=config.gamma0,
        policy=config.policy,
        seed=base_seed,
        timings=timings,
    )
    result: EdgeSequenceResult = infer_edge_sequence(seq.sets, stamps, net, dists, cache)
    traj = infer_locations(object_id, result, stamps, (start, end), net, cache, base_seed + [7], observed)
    if result.fallback:
        traj.flags.append("inference fallback")
    if seq.degraded:
        traj.flags.append("degraded pruning")
    timings["IN"] += time.perf_counter() - t1 - timings["PC"]
    return ObjectResult(traj, samples, timings, ratio, seq.degraded)


def _object_inputs(window: ServiceWindow, object_id: str):
    locs = list(window.buffers[object_id])
    observed = [True] * len(locs)
    prev, nxt = window.context.get(object_id, (None, None))
    if prev is not None:
        locs.insert(0, prev)
        observed.insert(0, False)
    if nxt is not None:
        locs.append(nxt)
        observed.append(False)
    return locs, observed


# worker-process state: the network is shipped once per pool
_WORKER_NET: Network | None = None


def _init_worker(net: Network) -> None:
    global _WORKER_NET
    _WORKER_NET = net


def _run_chunk(args):
    jobs, window_key, dists, config = args
    return [cleanse_object(oid, locs, obs, window_key, _WORKER_NET, dists, config) for oid, locs, obs in jobs]


@dataclass
class WindowOutput:
    window: ServiceWindow
    trajectories: list[CleanedTrajectory]
    samples: list[TravelTimeSample]
    timings: dict[str, float]
    skipped: list[str] = field(default_factory=list)
    compact_ratios: dict[str, float] = field(default_factory=dict)


def run_window(
    window: ServiceWindow,
    net: Network,
    dists,
    config: Config,
    pool: ProcessPoolExecutor | None = None,
) -> WindowOutput:
    """Cleanse every object of a closed window against ``dists``.

    Returns the cleansed trajectories (sorted by object id) and the travel
    time samples gathered from compact runs; applying the samples is left to
    the caller so that all objects see the same distributions.
    """
    timings = _zero_timings()
    skipped = [oid for oid, locs in window.buffers.items() if not locs]
    for oid in skipped:
        log.info("window %d: object %s has no locations, skipped", window.window_id, oid)
    ids = sorted(oid for oid, locs in window.buffers.items() if locs)
    jobs = [(oid, *_object_inputs(window, oid)) for oid in ids]
    key = (window.window_id, window.start_t, window.end_t)
    if pool is None or len(jobs) <= 1:
        results = [cleanse_object(oid, locs, obs, key, net, dists, config) for oid, locs, obs in jobs]
    else:
        n_chunks = min(len(jobs), config.workers * 4)
        chunks = [jobs[i::n_chunks] for i in range(n_chunks)]
        results = []
        for part in pool.map(_run_chunk, [(c, key, dists, config) for c in chunks]):
            results.extend(part)
        results.sort(key=lambda r: r.trajectory.object_id)
    samples = []
    ratios = {}
    for r in results:
        samples.extend(r.samples)
        ratios[r.trajectory.object_id] = r.compact_ratio
        for p in PHASES:
            timings[p] += r.timings[p]
    return WindowOutput(window, [r.trajectory for r in results], samples, timings, skipped, ratios)


@dataclass
class StreamSummary:
    windows: int = 0
    objects: int = 0
    records: int = 0
    dropped: int = 0
    samples: int = 0
    timings: dict[str, float] = field(default_factory=_zero_timings)
    per_window: list[dict] = field(default_factory=list)


def read_trajectories(source: str | Path | IO[str]) -> tuple[dict[str, list[CellularLocation]], int]:
    """Parse the trajectory CSV. Returns per-object locations and the number
    of records dropped for non-increasing timestamps."""
    fh = open(source, newline="", encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(f not in reader.fieldnames for f in INPUT_FIELDS):
            raise InputError(f"trajectory CSV header must contain {', '.join(INPUT_FIELDS)}")
        per_obj: dict[str, list[CellularLocation]] = {}
        last_t: dict[str, int] = {}
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            try:
                cl = CellularLocation(
                    str(row["object_id"]), float(row["lat"]), float(row["lon"]), int(row["t"]), int(row["u"])
                )
            except (TypeError, ValueError) as exc:
                raise InputError(f"line {lineno}: {exc}") from None
            if cl.object_id in last_t and cl.t <= last_t[cl.object_id]:
                dropped += 1
                continue
            last_t[cl.object_id] = cl.t
            per_obj.setdefault(cl.object_id, []).append(cl)
    finally:
        if fh is not source:
            fh.close()
    if dropped:
        log.warning("dropped %d records with non-increasing timestamps", dropped)
    return per_obj, dropped


def make_windows(per_obj: dict[str, list[CellularLocation]], window_len: int) -> list[ServiceWindow]:
    """Contiguous, non-overlapping windows covering all observations."""
    if not per_obj:
        return []
    t_min = min(locs[0].t for locs in per_obj.values())
    t_max = max(locs[-1].t for locs in per_obj.values())
    n = (t_max - t_min) // window_len + 1
    windows = [ServiceWindow(i, t_min + i * window_len, t_min + (i + 1) * window_len) for i in range(n)]
    for oid in sorted(per_obj):
        locs = per_obj[oid]
        by_win: dict[int, list[int]] = {}
        for k, cl in enumerate(locs):
            by_win.setdefault((cl.t - t_min) // window_len, []).append(k)
        for i, idx in by_win.items():
            w = windows[i]
            w.buffers[oid] = [locs[k] for k in idx]
            first, last = idx[0], idx[-1]
            prev = locs[first - 1] if first > 0 else None
            nxt = locs[last + 1] if last + 1 < len(locs) else None
            w.context[oid] = (prev, nxt)
    return windows


def write_records(fh: IO[str], trajectories: Iterable[CleanedTrajectory]) -> int:
    n = 0
    for traj in trajectories:
        for t, lat, lon, prov in traj.records:
            fh.write(f"{traj.object_id},{t},{lat:.7f},{lon:.7f},{prov}\n")
            n += 1
    return n


def run_stream(
    source: str | Path | IO[str],
    net: Network,
    config: Config,
    output: str | Path | IO[str],
    *,
    dists: DistributionStore | None = None,
    on_window=None,
) -> tuple[StreamSummary, DistributionStore]:
    """Cleanse a whole trajectory file window by window.

    Distributions evolve across windows; pass ``dists`` to continue from a
    persisted store, otherwise the network's initial store is used.
    """
    config.validate()
    per_obj, dropped = read_trajectories(source)
    if dists is None:
        dists = net.dists if net.dists is not None else DistributionStore.initial(net, config.init_samples, config.rng_seed)
    store = dists.snapshot()
    summary = StreamSummary(dropped=dropped, objects=len(per_obj))
    out = open(output, "w", newline="", encoding="utf-8") if isinstance(output, (str, Path)) else output
    pool = None
    try:
        if config.workers > 1:
            pool = ProcessPoolExecutor(config.workers, initializer=_init_worker, initargs=(net,))
        out.write(",".join(OUTPUT_FIELDS) + "\n")
        for window in make_windows(per_obj, config.window_len):
            snapshot = store.snapshot()
            res = run_window(window, net, snapshot, config, pool)
            summary.records += write_records(out, res.trajectories)
            t0 = time.perf_counter()
            store.apply_updates(res.samples, config.epsilon, config.delta)
            res.timings["OL"] += time.perf_counter() - t0
            summary.windows += 1
            summary.samples += len(res.samples)
            for p in PHASES:
                summary.timings[p] += res.timings[p]
            summary.per_window.append(
                {
                    "window_id": window.window_id,
                    "start_t": window.start_t,
                    "objects": len(res.trajectories),
                    "samples": len(res.samples),
                    **{p: res.timings[p] for p in PHASES},
                }
            )
            if on_window is not None:
                on_window(res, store)
    finally:
        if pool is not None:
            pool.shutdown()
        if out is not output:
            out.close()
    return summary, store


def read_cleansed(source: str | Path | IO[str]) -> list[tuple[str, int, float, float, str]]:
    fh = open(source, newline="", encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        reader = csv.DictReader(fh)
        return [(r["object_id"], int(r["t"]), float(r["lat"]), float(r["lon"]), r.get("provenance", "")) for r in reader]
    finally:
        if fh is not source:
            fh.close()


def cleanse_to_string(source, net: Network, config: Config, **kw) -> tuple[str, StreamSummary, DistributionStore]:
    buf = io.StringIO()
    summary, store = run_stream(source, net, config, buf, **kw)
    return buf.getvalue(), summary, store
