"""SpinConv graph neural network for atomic energies and forces."""
from .geometry import AtomicSystem, NeighborGraph, build_neighbor_graph, edge_frame, project_to_sphere
from .model import (
    ENERGY_CENTRIC,
    FORCE_CENTRIC,
    ModelConfig,
    SpinConvNet,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "AtomicSystem",
    "NeighborGraph",
    "build_neighbor_graph",
    "edge_frame",
    "project_to_sphere",
    "ENERGY_CENTRIC",
    "FORCE_CENTRIC",
    "ModelConfig",
    "SpinConvNet",
    "load_checkpoint",
    "save_checkpoint",
]
__version__ = "0.1.0"
