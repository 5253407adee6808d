import math
import sys

import pytest

from dtnc.netmodel import EARTH_RADIUS_M, Network, Vertex
from dtnc.synthlab import Scenario, grid_network
from dtnc.ttdist import DistributionStore, TravelTimeDistribution

LAT0, LON0 = 1.30, 103.80


def latlon(x, y, lat0=LAT0, lon0=LON0):
    """Inverse of a local equirectangular projection around (lat0, lon0)."""
    lat = lat0 + math.degrees(y / EARTH_RADIUS_M)
    lon = lon0 + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return lat, lon


def planar_network(points, edges, **kw):
    """Network from planar vertex coordinates (meters).

    Vertex coordinates are shifted so the bounding-box centre is the
    projection origin; ``net.xy`` then reproduces ``points`` up to that shift.
    """
    xs = [p[0] for p in points.values()]
    ys = [p[1] for p in points.values()]
    cx, cy = 0.5 * (min(xs) + max(xs)), 0.5 * (min(ys) + max(ys))
    verts = [Vertex(vid, *latlon(x - cx, y - cy)) for vid, (x, y) in points.items()]
    net = Network(verts, edges, **kw)
    net.offset = (cx, cy)
    return net


def at(net, x, y):
    """Lat/lon of a point given in the coordinates used to build ``net``."""
    cx, cy = net.offset
    return net.projection.unproject(x - cx, y - cy)


def fixed_store(net, table):
    return DistributionStore({eid: TravelTimeDistribution(table[eid]) for eid in net.edges})


@pytest.fixture(scope="session")
def grid_net():
    return grid_network(Scenario(rows=10, cols=10, spacing_m=150.0))


@pytest.fixture
def chain_net():
    """A -> B -> C, three collinear 100 m edges ending in a dead end."""
    pts = {0: (0.0, 0.0), 1: (100.0, 0.0), 2: (200.0, 0.0), 3: (300.0, 0.0)}
    edges = [("A", 0, 1, "trunk", 10.0), ("B", 1, 2, "trunk", 10.0), ("C", 2, 3, "trunk", 10.0)]
    return planar_network(pts, edges)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "SUMMARY", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
