"""Integer box arithmetic on the global anchor lattice.

A box is a pair of coordinate tuples ``(lo, hi)`` with ``lo[i] <= hi[i]``.
Degenerate axes (``lo[i] == hi[i]``) encode vertices/edges/faces; the open
interpretation of a box is the product of open intervals on its extended
axes and single points on degenerate ones.  All coordinates are integers at
the finest tree resolution, so every predicate here is exact.
"""

from __future__ import annotations

Box = tuple[tuple[int, ...], tuple[int, ...]]


def box_intersect(a: Box, b: Box) -> Box | None:
    lo = tuple(max(x, y) for x, y in zip(a[0], b[0]))
    hi = tuple(min(x, y) for x, y in zip(a[1], b[1]))
    if any(l > h for l, h in zip(lo, hi)):
        return None
    return lo, hi


def box_dim(box: Box) -> int:
    """Number of axes on which the box has positive extent."""
    return sum(1 for l, h in zip(box[0], box[1]) if l < h)


def box_contains(outer: Box, inner: Box) -> bool:
    """Closed containment: inner subset of outer."""
    return all(ol <= il and ih <= oh
               for ol, oh, il, ih in zip(outer[0], outer[1], inner[0], inner[1]))


def open_box_contains(outer: Box, inner: Box) -> bool:
    """Open containment: the open box of ``inner`` lies in the open box of ``outer``.

    Per axis: an extended outer interval must contain the inner one without
    touching its endpoints where the inner axis is degenerate; a degenerate
    outer axis requires an equal degenerate inner axis.
    """
    for ol, oh, il, ih in zip(outer[0], outer[1], inner[0], inner[1]):
        if ol == oh:
            if il != ol or ih != oh:
                return False
        elif il == ih:
            if not (ol < il < oh):
                return False
        else:
            if not (ol <= il and ih <= oh):
                return False
    return True
