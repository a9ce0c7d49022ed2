"""forestfem: forest-of-trees AMR with a conforming FE layer on top,
distribution simulated deterministically in one process."""

from .forest import (BrickConnectivity, Forest, NeighborSets, RankView,
                     ViewGuardError, adapt, balance, ghost, new_forest,
                     neighbors_of, partition, REFINE, COARSEN, KEEP)
from .morton import L_MAX, MortonKey, sfc_index
from .polytope import PARENT_INTERIOR, enumerate_nfaces, owner_nface, refinement_rule
from .simfabric import Fabric

__all__ = [
    "BrickConnectivity", "Forest", "NeighborSets", "RankView", "ViewGuardError",
    "adapt", "balance", "ghost", "new_forest", "neighbors_of", "partition",
    "REFINE", "COARSEN", "KEEP", "L_MAX", "MortonKey", "sfc_index",
    "PARENT_INTERIOR", "enumerate_nfaces", "owner_nface", "refinement_rule",
    "Fabric",
]
