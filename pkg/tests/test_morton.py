import random
from bisect import bisect_left

import pytest

from forestfem.morton import (L_MAX, MortonKey, child_index, child_of,
                              children_of, is_ancestor, parent_of, sfc_index,
                              subtree_index_range)


def all_cells(dim, max_level):
    """Every cell of the refinement tree S_max_level of one tree root."""
    out = [MortonKey(0, 0, (0,) * dim)]
    frontier = list(out)
    for _ in range(max_level):
        nxt = []
        for key in frontier:
            nxt.extend(children_of(key))
        out.extend(nxt)
        frontier = nxt
    return out


def exhaustive_sfc_axioms(dim, max_level):
    cells = all_cells(dim, max_level)
    idx = [(sfc_index(k), k.level, k) for k in cells]
    # property 1: (index, level) injective
    assert len({(i, l) for i, l, _ in idx}) == len(idx)
    # property 2: descendants compare >= ancestor
    for k in cells:
        if k.level < max_level:
            for c in children_of(k):
                assert sfc_index(k) <= sfc_index(c)
    # property 3: descendants sort strictly before any larger non-descendant;
    # equivalently every cell whose index falls inside the subtree range is a
    # descendant (or the ancestor chain sharing the first-child index)
    idx.sort(key=lambda t: (t[0], t[1]))
    indices = [t[0] for t in idx]
    for k in cells:
        lo, hi = subtree_index_range(k)
        pos = bisect_left(indices, lo)
        while pos < len(indices) and indices[pos] < hi:
            other = idx[pos][2]
            assert is_ancestor(k, other) or is_ancestor(other, k)
            pos += 1
    return len(cells)


def test_sfc_axioms_2d():
    assert exhaustive_sfc_axioms(2, 4) == 341


def test_sfc_axioms_3d():
    assert exhaustive_sfc_axioms(3, 4) == 4681


def test_parent_child_roundtrip():
    rng = random.Random(7)
    for dim in (2, 3):
        for _ in range(200):
            level = rng.randrange(1, 6)
            size = 1 << (L_MAX - level)
            anchor = tuple(rng.randrange(0, 1 << level) * size
                           for _ in range(dim))
            key = MortonKey(0, level, anchor)
            i = child_index(key)
            assert child_of(parent_of(key), i) == key
            for j, c in enumerate(children_of(key)):
                assert parent_of(c) == key
                assert child_index(c) == j
                # child anchors differ from the parent anchor by the z-order
                # offset times half the parent size
                half = size >> 1
                assert all((ca - pa) in (0, half)
                           for ca, pa in zip(c.anchor, key.anchor))


def test_root_has_no_parent():
    with pytest.raises(ValueError):
        parent_of(MortonKey(0, 0, (0, 0)))
