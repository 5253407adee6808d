"""Transportation network structure, planar projection, grid index and
candidate edge-fragment retrieval."""

from __future__ import annotations

import enum
import heapq
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable

EARTH_RADIUS_M = 6371008.8
MIN_FRAGMENT_M = 1.0
DEFAULT_CELL_SIZE_M = 100.0


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network input."""


class EdgeType(str, enum.Enum):
    TRUNK = "trunk"
    MOTORWAY = "motorway"
    SUBWAY = "subway"
    FOOTWAY = "footway"
    OTHER = "other"

    @classmethod
    def parse(cls, value: str) -> "EdgeType":
        try:
            return cls(str(value).lower())
        except ValueError:
            return cls.OTHER


def id_key(value: Hashable):
    """Sort key giving a total order over mixed int/str identifiers."""
    if isinstance(value, bool):
        return (1, str(value))
    if isinstance(value, int):
        return (0, value, "")
    return (1, str(value))


@dataclass(frozen=True)
class Vertex:
    vid: Hashable
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise NetworkError(f"vertex {self.vid!r}: coordinates out of range")


@dataclass(frozen=True)
class Edge:
    eid: Hashable
    s: Hashable
    d: Hashable
    edge_type: EdgeType
    length_m: float
    speed_limit_mps: float

    def __post_init__(self):
        if not self.length_m > 0:
            raise NetworkError(f"edge {self.eid!r}: zero or negative length")
        if not self.speed_limit_mps > 0:
            raise NetworkError(f"edge {self.eid!r}: speed limit must be positive")


@dataclass(frozen=True)
class CellularLocation:
    object_id: str
    lat: float
    lon: float
    t: int
    u: int

    def __post_init__(self):
        if self.u not in (1, 2, 3, 4, 5):
            raise ValueError(f"uncertainty degree must be in 1..5, got {self.u}")


@dataclass(frozen=True)
class EdgeFragment:
    """Sub-segment ``[p_l, p_r]`` of edge ``eid`` in arc-length meters."""

    eid: Hashable
    p_l: float
    p_r: float

    def __post_init__(self):
        if not (0.0 <= self.p_l < self.p_r):
            raise ValueError(f"invalid fragment offsets [{self.p_l}, {self.p_r}]")

    @property
    def length_m(self) -> float:
        return self.p_r - self.p_l

    @property
    def p_c(self) -> float:
        return 0.5 * (self.p_l + self.p_r)

    def contains(self, offset: float, tol: float = 1e-9) -> bool:
        return self.p_l - tol <= offset <= self.p_r + tol

    def sort_key(self):
        return (id_key(self.eid), self.p_l, self.p_r)


def uncertainty_radius(u: int) -> float:
    """Spatial error bound in meters for uncertainty degree ``u``."""
    if isinstance(u, bool) or int(u) != u or not 1 <= u <= 5:
        raise ValueError(f"uncertainty degree must be an integer in 1..5, got {u!r}")
    return 150.0 + 50.0 * (int(u) - 1)


class Projection:
    """Equirectangular projection about a fixed origin, in meters."""

    def __init__(self, lat0: float, lon0: float):
        self.lat0 = lat0
        self.lon0 = lon0
        self._coslat0 = math.cos(math.radians(lat0))

    def project(self, lat: float, lon: float) -> tuple[float, float]:
        x = EARTH_RADIUS_M * math.radians(lon - self.lon0) * self._coslat0
        y = EARTH_RADIUS_M * math.radians(lat - self.lat0)
        return x, y

    def unproject(self, x: float, y: float) -> tuple[float, float]:
        lat = self.lat0 + math.degrees(y / EARTH_RADIUS_M)
        lon = self.lon0 + math.degrees(x / (EARTH_RADIUS_M * self._coslat0))
        return lat, lon


def clip_segment_to_disk(
    a: tuple[float, float], b: tuple[float, float], center: tuple[float, float], radius: float
) -> tuple[float, float] | None:
    """Offsets ``(lo, hi)`` along segment a->b inside the disk, or None."""
    dx, dy = b[0] - a[0], b[1] - a[1]
    length = math.hypot(dx, dy)
    if length == 0.0:
        return None
    ux, uy = dx / length, dy / length
    cx, cy = center[0] - a[0], center[1] - a[1]
    s0 = cx * ux + cy * uy
    perp2 = cx * cx + cy * cy - s0 * s0
    disc = radius * radius - perp2
    if disc < 0.0:
        return None
    h = math.sqrt(disc)
    lo, hi = max(0.0, s0 - h), min(length, s0 + h)
    if hi <= lo:
        return None
    return lo, hi


def _clip_segment_to_box(a, b, xmin, ymin, xmax, ymax) -> tuple[float, float] | None:
    # Liang-Barsky on parameter u in [0, 1]
    dx, dy = b[0] - a[0], b[1] - a[1]
    u0, u1 = 0.0, 1.0
    for p, q in ((-dx, a[0] - xmin), (dx, xmax - a[0]), (-dy, a[1] - ymin), (dy, ymax - a[1])):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            u0 = max(u0, r)
        else:
            u1 = min(u1, r)
        if u0 > u1:
            return None
    return u0, u1


class GridIndex:
    """Uniform grid over the projected plane mapping cells to edge extents."""

    def __init__(self, cell_size_m: float = DEFAULT_CELL_SIZE_M):
        if cell_size_m <= 0:
            raise ValueError("cell size must be positive")
        self.cell_size_m = cell_size_m
        self.cells: dict[tuple[int, int], list[tuple[Hashable, float, float]]] = defaultdict(list)

    def _cell(self, x: float, y: float) -> tuple[int, int]:
        return math.floor(x / self.cell_size_m), math.floor(y / self.cell_size_m)

    def insert(self, eid: Hashable, a: tuple[float, float], b: tuple[float, float]) -> None:
        length = math.hypot(b[0] - a[0], b[1] - a[1])
        c0, c1 = self._cell(*a), self._cell(*b)
        size = self.cell_size_m
        for i in range(min(c0[0], c1[0]), max(c0[0], c1[0]) + 1):
            for j in range(min(c0[1], c1[1]), max(c0[1], c1[1]) + 1):
                hit = _clip_segment_to_box(a, b, i * size, j * size, (i + 1) * size, (j + 1) * size)
                if hit is not None:
                    self.cells[(i, j)].append((eid, hit[0] * length, hit[1] * length))

    def query_disk(self, center: tuple[float, float], radius: float) -> list[Hashable]:
        """Edge ids with an entry in any cell overlapping the disk's bounding box."""
        (i0, j0) = self._cell(center[0] - radius, center[1] - radius)
        (i1, j1) = self._cell(center[0] + radius, center[1] + radius)
        seen: dict[Hashable, None] = {}
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                for eid, _, _ in self.cells.get((i, j), ()):
                    seen.setdefault(eid, None)
        return list(seen)

    def __len__(self) -> int:
        return len(self.cells)


class Network:
    """Directed transportation graph with projected geometry and a grid index.

    The structure is immutable after construction. Travel-time distributions
    live in a separate store (see :mod:`dtnc.ttdist`); ``dists`` holds the
    store initialised at load time.
    """

    def __init__(
        self,
        vertices: Iterable[Vertex],
        edges: Iterable[tuple[Hashable, Hashable, Hashable, str, float]],
        *,
        cell_size_m: float = DEFAULT_CELL_SIZE_M,
        allow_loops: bool = False,
    ):
        self.vertices: dict[Hashable, Vertex] = {}
        for v in vertices:
            if v.vid in self.vertices:
                raise NetworkError(f"duplicate vertex id {v.vid!r}")
            self.vertices[v.vid] = v
        if not self.vertices:
            raise NetworkError("network has no vertices")

        lats = [v.lat for v in self.vertices.values()]
        lons = [v.lon for v in self.vertices.values()]
        self.projection = Projection(0.5 * (min(lats) + max(lats)), 0.5 * (min(lons) + max(lons)))
        self.xy = {vid: self.projection.project(v.lat, v.lon) for vid, v in self.vertices.items()}

        self.edges: dict[Hashable, Edge] = {}
        self.out_edges: dict[Hashable, list[Hashable]] = {vid: [] for vid in self.vertices}
        self.index = GridIndex(cell_size_m)
        for eid, s, d, etype, speed in edges:
            if eid in self.edges:
                raise NetworkError(f"duplicate edge id {eid!r}")
            for vid in (s, d):
                if vid not in self.vertices:
                    raise NetworkError(f"edge {eid!r} references undefined vertex {vid!r}")
            if s == d and not allow_loops:
                raise NetworkError(f"edge {eid!r} is a loop")
            a, b = self.xy[s], self.xy[d]
            length = math.hypot(b[0] - a[0], b[1] - a[1])
            if length <= 0.0:
                raise NetworkError(f"edge {eid!r} has zero length")
            edge = Edge(eid, s, d, EdgeType.parse(etype), length, float(speed))
            self.edges[eid] = edge
            self.out_edges[s].append(eid)
            self.index.insert(eid, a, b)
        self._incoming: dict[Hashable, list[Hashable]] = {vid: [] for vid in self.vertices}
        for e in self.edges.values():
            self._incoming[e.d].append(e.eid)
        for adj in (self.out_edges, self._incoming):
            for vid in adj:
                adj[vid].sort(key=id_key)
        self.dists = None
        self._sp_cache: dict[Hashable, dict[Hashable, float]] = {}

    # geometry -----------------------------------------------------------

    def edge_xy(self, eid: Hashable, offset: float) -> tuple[float, float]:
        e = self.edges[eid]
        (ax, ay), (bx, by) = self.xy[e.s], self.xy[e.d]
        f = min(max(offset / e.length_m, 0.0), 1.0)
        return ax + f * (bx - ax), ay + f * (by - ay)

    def edge_latlon(self, eid: Hashable, offset: float) -> tuple[float, float]:
        return self.projection.unproject(*self.edge_xy(eid, offset))

    def edge_direction(self, eid: Hashable) -> tuple[float, float]:
        e = self.edges[eid]
        (ax, ay), (bx, by) = self.xy[e.s], self.xy[e.d]
        return (bx - ax) / e.length_m, (by - ay) / e.length_m

    def location_xy(self, cl: CellularLocation) -> tuple[float, float]:
        return self.projection.project(cl.lat, cl.lon)

    # shortest paths -----------------------------------------------------

    def vertex_distances(self, source: Hashable) -> dict[Hashable, float]:
        """Directed shortest-path lengths from ``source`` (cached)."""
        cached = self._sp_cache.get(source)
        if cached is not None:
            return cached
        dist = {source: 0.0}
        heap = [(0.0, 0, source)]
        tiebreak = 1
        done = set()
        while heap:
            du, _, u = heapq.heappop(heap)
            if u in done:
                continue
            done.add(u)
            for eid in self.out_edges[u]:
                e = self.edges[eid]
                nd = du + e.length_m
                if nd < dist.get(e.d, math.inf):
                    dist[e.d] = nd
                    heapq.heappush(heap, (nd, tiebreak, e.d))
                    tiebreak += 1
        self._sp_cache[source] = dist
        return dist

    def vertex_path(self, source: Hashable, target: Hashable) -> list[Hashable] | None:
        """Edge ids of one shortest directed path between two vertices."""
        if source == target:
            return []
        dist = self.vertex_distances(source)
        if target not in dist:
            return None
        incoming = self._incoming
        path = []
        node = target
        while node != source:
            best = None
            for eid in incoming[node]:
                e = self.edges[eid]
                if e.s in dist and abs(dist[e.s] + e.length_m - dist[node]) <= 1e-6:
                    best = e
                    break
            if best is None:
                return None
            path.append(best.eid)
            node = best.s
        path.reverse()
        return path

    def network_distance(self, eid_a: Hashable, off_a: float, eid_b: Hashable, off_b: float) -> float:
        """Directed network distance between two on-edge points."""
        if eid_a == eid_b and off_b >= off_a:
            return off_b - off_a
        ea, eb = self.edges[eid_a], self.edges[eid_b]
        dist = self.vertex_distances(ea.d)
        mid = dist.get(eb.s)
        if mid is None:
            return math.inf
        return (ea.length_m - off_a) + mid + off_b

    def fragment_gap(self, frag_a, frag_b) -> float:
        """Shortest directed network distance from any point of ``frag_a`` to
        any point of ``frag_b``."""
        if frag_a.eid == frag_b.eid and frag_b.p_r >= frag_a.p_l:
            return max(0.0, frag_b.p_l - frag_a.p_r)
        return self.network_distance(frag_a.eid, frag_a.p_r, frag_b.eid, frag_b.p_l)

    def bbox_xy(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.xy.values()]
        ys = [p[1] for p in self.xy.values()]
        return min(xs), min(ys), max(xs), max(ys)

    # serialization ------------------------------------------------------

    def to_records(self) -> list[dict]:
        recs = [{"v": v.vid, "lat": v.lat, "lon": v.lon} for v in self.vertices.values()]
        recs += [
            {"e": e.eid, "s": e.s, "d": e.d, "type": e.edge_type.value, "speed_mps": e.speed_limit_mps}
            for e in self.edges.values()
        ]
        return recs

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec) + "\n")


def parse_network(lines: Iterable[str], *, cell_size_m: float = DEFAULT_CELL_SIZE_M) -> Network:
    vertices: list[Vertex] = []
    edges: list[tuple] = []
    known: set = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            if "v" in rec:
                if edges:
                    raise ValueError("vertex record after edge records")
                vertices.append(Vertex(rec["v"], float(rec["lat"]), float(rec["lon"])))
                known.add(rec["v"])
            elif "e" in rec:
                for end in ("s", "d"):
                    if rec[end] not in known:
                        raise NetworkError(f"edge {rec['e']!r} references undefined vertex {rec[end]!r}")
                edges.append((rec["e"], rec["s"], rec["d"], rec.get("type", "other"), float(rec["speed_mps"])))
            else:
                raise ValueError("record is neither a vertex nor an edge")
        except NetworkError as exc:
            raise NetworkError(f"line {lineno}: {exc}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise NetworkError(f"line {lineno}: malformed record ({exc})") from exc
    return Network(vertices, edges, cell_size_m=cell_size_m)


def load_network(
    network_file: str | Path,
    *,
    cell_size_m: float = DEFAULT_CELL_SIZE_M,
    init_samples: int = 100,
    seed: int = 0,
) -> Network:
    """Read a JSON-lines network file and initialise per-edge distributions."""
    from dtnc.ttdist import DistributionStore

    with open(network_file, encoding="utf-8") as fh:
        net = parse_network(fh, cell_size_m=cell_size_m)
    net.dists = DistributionStore.initial(net, n_samples=init_samples, seed=seed)
    return net


def _fragment_from_clip(eid, clip, min_fragment_m) -> EdgeFragment | None:
    if clip is None:
        return None
    lo, hi = clip
    if hi - lo < min_fragment_m:
        return None
    return EdgeFragment(eid, lo, hi)


def clip_edges(
    net: Network,
    center: tuple[float, float],
    radius: float,
    eids: Iterable[Hashable],
    min_fragment_m: float = MIN_FRAGMENT_M,
) -> list[EdgeFragment]:
    out = []
    for eid in eids:
        e = net.edges[eid]
        frag = _fragment_from_clip(eid, clip_segment_to_disk(net.xy[e.s], net.xy[e.d], center, radius), min_fragment_m)
        if frag is not None:
            out.append(frag)
    out.sort(key=EdgeFragment.sort_key)
    return out


def retrieve_fragments(
    cl: CellularLocation, net: Network, min_fragment_m: float = MIN_FRAGMENT_M
) -> list[EdgeFragment]:
    """Candidate fragments within the uncertainty disk of ``cl``.

    A disk meets a straight edge in one interval, so the result holds at
    most one fragment per edge, sorted by edge id.
    """
    center = net.location_xy(cl)
    radius = uncertainty_radius(cl.u)
    return clip_edges(net, center, radius, net.index.query_disk(center, radius), min_fragment_m)


def retrieve_fragments_scan(
    cl: CellularLocation, net: Network, min_fragment_m: float = MIN_FRAGMENT_M
) -> list[EdgeFragment]:
    """Same as :func:`retrieve_fragments` without the index (linear scan)."""
    return clip_edges(net, net.location_xy(cl), uncertainty_radius(cl.u), net.edges, min_fragment_m)
