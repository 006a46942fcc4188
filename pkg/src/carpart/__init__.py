"""Bayesian spatial clustering of areal time series by particle optimization."""

from .graph import AdjacencyGraph, connected_components, induced_laplacian, is_connected
from .model import Dataset, ModelConfig, log_marginal_likelihood, posterior_means
from .partition import Particle, SpatialPartition
from .search import SearchConfig, run

__all__ = [
    "AdjacencyGraph", "Dataset", "ModelConfig", "Particle", "SearchConfig", "SpatialPartition",
    "connected_components", "induced_laplacian", "is_connected", "log_marginal_likelihood",
    "posterior_means", "run",
]
