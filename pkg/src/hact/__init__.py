"""Hierarchical cell-to-tissue (HACT) graphs and the HACT-Net classifier in NumPy."""

from .gnn import HactNet, ModelConfig, collate, hactnet_forward
from .graph_build import EntityGraph, HactGraph, assemble_hact, build_cell_topology, build_tissue_topology
from .metrics import Metrics, weighted_f1
from .stain_norm import StainBasis, estimate_stain_basis, normalize_image

__version__ = "0.1.0"

__all__ = [
    "EntityGraph",
    "HactGraph",
    "HactNet",
    "Metrics",
    "ModelConfig",
    "StainBasis",
    "assemble_hact",
    "build_cell_topology",
    "build_tissue_topology",
    "collate",
    "estimate_stain_basis",
    "hactnet_forward",
    "normalize_image",
    "weighted_f1",
]
