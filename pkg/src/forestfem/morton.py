"""Morton (z-order) keys for tree cells.

A cell inside one tree is identified by its refinement level and an anchor:
the lexicographically smallest corner expressed on the finest lattice, i.e.
coordinates in ``[0, 2**L_MAX)`` that are multiples of ``2**(L_MAX - level)``.
The SFC index is the bit interleave of the anchor coordinates (x fastest),
so the (index, level) pair identifies a cell uniquely, descendants never
sort below their ancestor, and a subtree occupies the contiguous index range
``[index, index + 2**(d*(L_MAX-level)))``.
"""

from __future__ import annotations

from dataclasses import dataclass

L_MAX = 29


@dataclass(frozen=True, order=True)
class MortonKey:
    tree: int
    level: int
    anchor: tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.anchor)

    @property
    def size(self) -> int:
        """Cell edge length on the finest lattice."""
        return 1 << (L_MAX - self.level)


def _spread_table(d: int):
    table = []
    for byte in range(256):
        out = 0
        for bit in range(8):
            if byte >> bit & 1:
                out |= 1 << (bit * d)
        table.append(out)
    return table


_SPREAD = {2: _spread_table(2), 3: _spread_table(3)}
_INDEX_CACHE: dict[MortonKey, int] = {}


def sfc_index(key: MortonKey) -> int:
    """Interleave anchor bits, axis 0 occupying the least significant slot."""
    out = _INDEX_CACHE.get(key)
    if out is None:
        d = key.dim
        table = _SPREAD[d]
        out = 0
        for ax, coord in enumerate(key.anchor):
            shift = ax
            while coord:
                out |= table[coord & 0xFF] << shift
                coord >>= 8
                shift += 8 * d
        _INDEX_CACHE[key] = out
    return out


def subtree_index_range(key: MortonKey) -> tuple[int, int]:
    """Half-open SFC index range covered by the cell and all its descendants."""
    lo = sfc_index(key)
    return lo, lo + (1 << (key.dim * (L_MAX - key.level)))


def child_of(key: MortonKey, i: int) -> MortonKey:
    h = key.size >> 1
    anchor = tuple(a + (((i >> ax) & 1) * h) for ax, a in enumerate(key.anchor))
    return MortonKey(key.tree, key.level + 1, anchor)


def children_of(key: MortonKey) -> list[MortonKey]:
    return [child_of(key, i) for i in range(1 << key.dim)]


def parent_of(key: MortonKey) -> MortonKey:
    if key.level == 0:
        raise ValueError("root cell has no parent")
    h = key.size << 1
    anchor = tuple((a // h) * h for a in key.anchor)
    return MortonKey(key.tree, key.level - 1, anchor)


def child_index(key: MortonKey) -> int:
    """Index of the cell within its sibling family (z-order)."""
    h = key.size
    idx = 0
    for ax, a in enumerate(key.anchor):
        if (a // h) & 1:
            idx |= 1 << ax
    return idx


def is_ancestor(anc: MortonKey, key: MortonKey) -> bool:
    """True when ``anc`` equals or strictly contains ``key`` (same tree)."""
    if anc.tree != key.tree or anc.level > key.level:
        return False
    size = anc.size
    return all(al <= a < al + size for al, a in zip(anc.anchor, key.anchor))
