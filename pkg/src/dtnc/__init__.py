"""Cellular trajectory cleansing over a transportation network with
online-learned edge travel-time distributions."""

from dtnc.netmodel import CellularLocation, EdgeFragment, Network, load_network, retrieve_fragments, uncertainty_radius
from dtnc.pipeline import Config, run_stream, run_window
from dtnc.ttdist import DistributionStore, TravelTimeDistribution, hoeffding_range, narrow, update_distribution

__all__ = [
    "CellularLocation",
    "Config",
    "DistributionStore",
    "EdgeFragment",
    "Network",
    "TravelTimeDistribution",
    "hoeffding_range",
    "load_network",
    "narrow",
    "retrieve_fragments",
    "run_stream",
    "run_window",
    "uncertainty_radius",
    "update_distribution",
]

__version__ = "0.1.0"
