"""Independent test oracles: brute-force geometry over all leaf pairs.

These deliberately avoid the region-search fast paths in forestfem.forest so
that the arithmetic neighbor machinery is checked against a direct reading
of the definitions.
"""

from __future__ import annotations

import random

import numpy as np

from forestfem.boxes import box_dim, box_intersect, open_box_contains
from forestfem.forest import (COARSEN, KEEP, REFINE, BrickConnectivity, Forest,
                              NeighborEntry, NeighborSets, adapt, balance,
                              new_forest)


def brute_neighbor_sets(forest: Forest, key, fid) -> NeighborSets:
    """Def. 2.5 applied literally: scan every other leaf and every one of its
    n-faces for the (a)+(b) conditions."""
    fbox = forest.face_box(key, fid)
    kbox = forest.cell_box(key)
    sets = NeighborSets()
    for other in forest.iter_leaves():
        if other == key:
            continue
        contact = box_intersect(kbox, forest.cell_box(other))
        if contact is None:
            continue
        for face in forest.topo.nfaces:
            obox = forest.face_box(other, face.id)
            meet = box_intersect(fbox, obox)
            if meet != contact:
                continue
            entry = NeighborEntry(other, face.id)
            if obox == fbox:
                sets.conformal.append(entry)
            elif open_box_contains(fbox, obox):
                sets.higher.append(entry)
            elif open_box_contains(obox, fbox):
                sets.lower.append(entry)
    return sets


def check_k_balanced(forest: Forest, k: int) -> bool:
    """Exhaustive pairwise Def. 2.8 check via numpy box arithmetic."""
    keys = list(forest.iter_leaves())
    n = len(keys)
    if n < 2:
        return True
    lo = np.array([forest.cell_box(key)[0] for key in keys], dtype=np.int64)
    hi = np.array([forest.cell_box(key)[1] for key in keys], dtype=np.int64)
    lev = np.array([key.level for key in keys], dtype=np.int64)
    ilo = np.maximum(lo[:, None, :], lo[None, :, :])
    ihi = np.minimum(hi[:, None, :], hi[None, :, :])
    touch = np.all(ilo <= ihi, axis=2)
    cdim = np.sum(ilo < ihi, axis=2)
    np.fill_diagonal(touch, False)
    bad = touch & (cdim >= k) & (np.abs(lev[:, None] - lev[None, :]) > 1)
    return not bad.any()


def refines(coarse: Forest, fine: Forest) -> bool:
    """Every leaf of ``fine`` is a descendant-or-equal of a leaf of ``coarse``."""
    for key in coarse.iter_leaves():
        for other in fine.leaves_overlapping_cell(key.tree, key.level, key.anchor):
            if other.level < key.level:
                return False
    return True


def random_adapt_forest(seed: int, dim: int, rounds: int, *, ranks: int = 1,
                        conn: BrickConnectivity | None = None,
                        start_level: int = 1, refine_prob: float = 0.22,
                        coarsen_prob: float = 0.1, max_leaves: int = 400) -> Forest:
    """Seeded random refine/coarsen sequence used across the test corpus."""
    rng = random.Random(seed)
    if conn is None:
        conn = BrickConnectivity((2, 1) if dim == 2 else (1, 1, 1))
    forest = new_forest(conn, start_level, ranks)
    for _ in range(rounds):
        flags = {}
        grow = forest.num_leaves < max_leaves
        for key in forest.iter_leaves():
            r = rng.random()
            if grow and r < refine_prob:
                flags[key] = REFINE
            elif r > 1.0 - coarsen_prob:
                flags[key] = COARSEN
            else:
                flags[key] = KEEP
        forest = adapt(forest, flags)
    return forest


def random_balanced_forest(seed: int, dim: int, k: int, *, rounds: int = 3,
                           ranks: int = 1, **kw) -> Forest:
    return balance(random_adapt_forest(seed, dim, rounds, ranks=ranks, **kw), k)
