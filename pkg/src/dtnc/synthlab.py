"""Synthetic cities with ground truth, and evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Hashable, Iterable, Mapping, Sequence

import numpy as np

from dtnc.netmodel import EARTH_RADIUS_M, CellularLocation, EdgeFragment, Network, Vertex, uncertainty_radius

BUCKETS = ((0, 50), (50, 100), (100, 150), (150, 200), (200, 300), (300, math.inf))
BUCKET_LABELS = ("<=50", "50-100", "100-150", "150-200", "200-300", ">300")

# average degree ~3.85, 70% of locations with u >= 4
DEFAULT_U_WEIGHTS = (0.05, 0.10, 0.15, 0.35, 0.35)


class EvalError(ValueError):
    """Cleansed and ground-truth data cannot be aligned."""


@dataclass
class Scenario:
    rows: int = 10
    cols: int = 10
    spacing_m: float = 500.0
    # each block is split into this many collinear edges
    segments: int = 1
    origin_lat: float = 1.30
    origin_lon: float = 103.80
    speed_limit_mps: float = 15.0
    edge_type: str = "trunk"
    n_objects: int = 100
    duration_s: int = 280
    start_t: int = 1_600_000_000
    # per-edge traffic: true speed = limit * U(lo, hi), per object x U(1-j, 1+j)
    speed_factor: tuple[float, float] = (0.5, 0.9)
    object_jitter: float = 0.05
    # noise distance ~ half-normal(sigma_frac * r(u)) truncated below r(u)
    noise: bool = True
    sigma_frac: float = 1.0
    u_weights: tuple[float, ...] = DEFAULT_U_WEIGHTS
    # observation schedule: "all", "fixed" (every gap_s) or "mean" (random, mean gap_s)
    dropout: str = "mean"
    gap_s: float = 14.0

    @classmethod
    def from_json(cls, obj: Mapping) -> "Scenario":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in obj.items() if k in known}
        return cls(**kw)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TruthPoint:
    object_id: str
    t: int
    lat: float
    lon: float
    eid: Hashable
    offset: float


@dataclass
class Generated:
    net: Network
    raw: dict[str, list[CellularLocation]]
    truth: dict[str, list[TruthPoint]]
    edge_speeds: dict[Hashable, float]

    def truth_at(self, object_id: str, t: int) -> TruthPoint:
        pts = self.truth[object_id]
        return pts[t - pts[0].t]


def grid_network(scenario: Scenario, cell_size_m: float = 100.0) -> Network:
    """Two-way rectangular grid of ``rows x cols`` intersections.

    Intersection ``(r, c)`` is vertex ``r*cols + c``; blocks split into
    several edges get extra vertices numbered after the intersections.
    """
    rows, cols, seg = scenario.rows, scenario.cols, max(1, int(scenario.segments))
    lat_step = math.degrees(scenario.spacing_m / EARTH_RADIUS_M)
    lon_step = lat_step / math.cos(math.radians(scenario.origin_lat))

    def pos(r: float, c: float) -> tuple[float, float]:
        return scenario.origin_lat + r * lat_step, scenario.origin_lon + c * lon_step

    verts = [Vertex(r * cols + c, *pos(r, c)) for r in range(rows) for c in range(cols)]
    pairs = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            for nr, nc in ((r, c + 1), (r + 1, c)):
                if nr >= rows or nc >= cols:
                    continue
                chain = [v]
                for i in range(1, seg):
                    vid = len(verts)
                    verts.append(Vertex(vid, *pos(r + (nr - r) * i / seg, c + (nc - c) * i / seg)))
                    chain.append(vid)
                chain.append(nr * cols + nc)
                for a, b in zip(chain, chain[1:]):
                    pairs.append((a, b))
                    pairs.append((b, a))
    recs = [(i, s, d, scenario.edge_type, scenario.speed_limit_mps) for i, (s, d) in enumerate(pairs)]
    return Network(verts, recs, cell_size_m=cell_size_m)


def _route(net: Network, rng, start_eid, start_off, speeds, jitter, duration):
    """Per-second (eid, offset) of a random walk without immediate U-turns."""
    eid, off = start_eid, start_off
    out = []
    clock = 0.0
    speed = speeds[eid] * jitter
    t = 0
    while t < duration:
        e = net.edges[eid]
        t_end = clock + (e.length_m - off) / speed
        while t < duration and t <= t_end:
            out.append((eid, min(off + (t - clock) * speed, e.length_m)))
            t += 1
        if t >= duration:
            break
        outs = [x for x in net.out_edges[e.d] if net.edges[x].d != e.s] or net.out_edges[e.d]
        clock = t_end
        eid, off = outs[int(rng.integers(len(outs)))], 0.0
        speed = speeds[eid] * jitter
    return out


def _observation_times(rng, scenario: Scenario) -> list[int]:
    if scenario.dropout == "all":
        return list(range(scenario.duration_s))
    if scenario.dropout == "fixed":
        g = int(scenario.gap_s)
        return list(range(0, scenario.duration_s, g))
    if scenario.dropout == "mean":
        times, t = [], 0
        while t < scenario.duration_s:
            times.append(t)
            t += max(1, int(round(rng.exponential(scenario.gap_s))))
        return times
    raise ValueError(f"unknown dropout model {scenario.dropout!r}")


def noisy_offset(rng, u: int, sigma_frac: float) -> tuple[float, float]:
    """Planar displacement with uniform direction and a truncated half-normal
    distance strictly below r(u)."""
    r = uncertainty_radius(u)
    while True:
        dist = abs(rng.normal(0.0, sigma_frac * r))
        if dist < r:
            break
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return dist * math.cos(theta), dist * math.sin(theta)


def generate(scenario: Scenario, seed: int = 0, net: Network | None = None) -> Generated:
    rng = np.random.default_rng(seed)
    if net is None:
        net = grid_network(scenario)
    eids = sorted(net.edges)
    lo, hi = scenario.speed_factor
    speeds = {eid: net.edges[eid].speed_limit_mps * rng.uniform(lo, hi) for eid in eids}
    u_vals = np.arange(1, 6)
    u_p = np.asarray(scenario.u_weights, dtype=float)
    u_p = u_p / u_p.sum()
    raw: dict[str, list[CellularLocation]] = {}
    truth: dict[str, list[TruthPoint]] = {}
    width = len(str(max(scenario.n_objects - 1, 0)))
    for i in range(scenario.n_objects):
        oid = f"o{i:0{width}d}"
        jitter = rng.uniform(1 - scenario.object_jitter, 1 + scenario.object_jitter)
        e0 = eids[int(rng.integers(len(eids)))]
        off0 = rng.uniform(0, net.edges[e0].length_m)
        path = _route(net, rng, e0, off0, speeds, jitter, scenario.duration_s)
        pts = []
        for k, (eid, off) in enumerate(path):
            lat, lon = net.edge_latlon(eid, off)
            pts.append(TruthPoint(oid, scenario.start_t + k, lat, lon, eid, off))
        truth[oid] = pts
        obs = []
        for k in _observation_times(rng, scenario):
            u = int(rng.choice(u_vals, p=u_p))
            x, y = net.edge_xy(*path[k])
            if scenario.noise:
                dx, dy = noisy_offset(rng, u, scenario.sigma_frac)
                x, y = x + dx, y + dy
            lat, lon = net.projection.unproject(x, y)
            obs.append(CellularLocation(oid, lat, lon, scenario.start_t + k, u))
        raw[oid] = obs
    return Generated(net, raw, truth, speeds)


def true_fragment(cands: Sequence[EdgeFragment], point: TruthPoint) -> EdgeFragment | None:
    """The candidate containing the ground-truth position, if any."""
    for f in cands:
        if f.eid == point.eid and f.contains(point.offset, tol=1e-6):
            return f
    return None


# ---------------------------------------------------------------- I/O


def write_raw(fh: IO[str], raw: Mapping[str, Sequence[CellularLocation]]) -> None:
    fh.write("object_id,t,lat,lon,u\n")
    for oid in sorted(raw):
        for cl in raw[oid]:
            fh.write(f"{oid},{cl.t},{cl.lat:.8f},{cl.lon:.8f},{cl.u}\n")


def write_truth(fh: IO[str], truth: Mapping[str, Sequence[TruthPoint]]) -> None:
    fh.write("object_id,t,lat,lon,eid,offset\n")
    for oid in sorted(truth):
        for p in truth[oid]:
            fh.write(f"{oid},{p.t},{p.lat:.8f},{p.lon:.8f},{p.eid},{p.offset:.3f}\n")


def read_truth(source) -> dict[tuple[str, int], tuple[float, float]]:
    fh = open(source, newline="", encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        return {(r["object_id"], int(r["t"])): (float(r["lat"]), float(r["lon"])) for r in csv.DictReader(fh)}
    finally:
        if fh is not source:
            fh.close()


def truth_table(gen: Generated) -> dict[tuple[str, int], tuple[float, float]]:
    return {(p.object_id, p.t): (p.lat, p.lon) for pts in gen.truth.values() for p in pts}


# ---------------------------------------------------------------- metrics


def planar_distance(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Equirectangular approximation of the great-circle distance in meters."""
    phi = math.radians(0.5 * (lat1 + lat2))
    dx = math.radians(lon2 - lon1) * math.cos(phi)
    dy = math.radians(lat2 - lat1)
    return EARTH_RADIUS_M * math.hypot(dx, dy)


@dataclass
class EvalReport:
    n: int
    histogram: dict[str, float]
    median_m: float
    mean_m: float
    deviations: list[float] = field(default_factory=list, repr=False)
    pdr_ep: float | None = None
    pdr_tp: float | None = None
    compact_ratio: float | None = None
    accuracy_loss: float | None = None
    skipped: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("deviations")
        return d

    @property
    def within_50(self) -> float:
        return self.histogram[BUCKET_LABELS[0]]


def histogram(deviations: Sequence[float]) -> dict[str, float]:
    n = len(deviations)
    counts = [0] * len(BUCKETS)
    for d in deviations:
        for i, (lo, hi) in enumerate(BUCKETS):
            if (d <= hi if i == 0 else lo < d <= hi):
                counts[i] += 1
                break
    return {label: (c / n if n else 0.0) for label, c in zip(BUCKET_LABELS, counts)}


def deviation_report(
    cleansed: Iterable[tuple[str, int, float, float]] | Iterable[tuple],
    truth: Mapping[tuple[str, int], tuple[float, float]],
    *,
    skip_missing: bool = False,
) -> EvalReport:
    """Per-record distance to ground truth, bucketed by distance band.

    A cleansed ``(object_id, t)`` without a ground-truth position raises
    :class:`EvalError`, unless ``skip_missing`` is set; skipped records are
    counted in ``EvalReport.skipped``.
    """
    devs = []
    skipped = 0
    for rec in cleansed:
        oid, t, lat, lon = rec[0], int(rec[1]), float(rec[2]), float(rec[3])
        gt = truth.get((oid, t))
        if gt is None:
            if skip_missing:
                skipped += 1
                continue
            raise EvalError(f"no ground truth for object {oid} at t={t}")
        devs.append(planar_distance(lat, lon, gt[0], gt[1]))
    if not devs:
        return EvalReport(0, histogram([]), math.nan, math.nan, [], skipped=skipped)
    arr = np.asarray(devs)
    return EvalReport(len(devs), histogram(devs), float(np.median(arr)), float(arr.mean()), devs, skipped=skipped)


def raw_records(raw: Mapping[str, Sequence[CellularLocation]]) -> list[tuple[str, int, float, float]]:
    return [(cl.object_id, cl.t, cl.lat, cl.lon) for locs in raw.values() for cl in locs]


def probability_difference_ratio(probs: Mapping, actual) -> float | None:
    """``(p_max - p_actual) / p_max``; None when ``actual`` is not a candidate."""
    if actual not in probs or not probs:
        return None
    p_max = max(probs.values())
    if p_max <= 0:
        return None
    return (p_max - probs[actual]) / p_max


def _mean_pdr(items) -> tuple[float, int]:
    vals, excluded = [], 0
    for probs, actual in items:
        r = probability_difference_ratio(probs, actual)
        if r is None:
            excluded += 1
        else:
            vals.append(r)
    return (float(np.mean(vals)) if vals else math.nan), excluded


def pdr_ep(emissions: Iterable[tuple[Mapping, object]]) -> tuple[float, int]:
    """Average emission PDR over (emission map, true fragment) pairs.

    Returns the mean ratio and the number of excluded locations.
    """
    return _mean_pdr(emissions)


def pdr_tp(estimates: Iterable[tuple[Mapping, object]]) -> tuple[float, int]:
    """Average transition PDR over (transition map, true next fragment) pairs."""
    return _mean_pdr(estimates)


def accuracy_loss(narrowed_mean: float, full_mean: float) -> float:
    return abs(narrowed_mean - full_mean) / full_mean


def write_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
