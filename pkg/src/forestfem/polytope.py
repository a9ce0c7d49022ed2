"""Reference hypercube topology and the 1:2^d refinement rule.

Cells are axis-aligned hypercubes (quad for d=2, hex for d=3).  n-faces are
identified dimension-major: all vertices first, then edges, then (in 3D)
faces.  Within one dimension, faces are ordered by their set of spanning
axes (as a bitmask) and then by side tuple in z-order, which matches the
Morton child ordering used by the forest layer.

Reference coordinates live on the integer lattice of the doubly refined
cell: the parent spans ``[0, 2]^d`` so that children are the unit boxes and
every child face has integer coordinates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

from .boxes import Box, box_contains, open_box_contains

PARENT_INTERIOR = -1


@dataclass(frozen=True)
class NFace:
    """One n-face of the reference cell.

    ``span`` lists the axes along which the face is extended; ``sides`` gives,
    for each non-spanning axis, 0 (low side) or 1 (high side).  ``box`` is the
    closed face box on the [0, 2]^d parent lattice.
    """
    id: int
    ndim: int
    span: tuple[int, ...]
    sides: tuple[int, ...]
    vertices: tuple[int, ...]
    box: Box


@dataclass(frozen=True)
class RefTopology:
    dim: int
    nfaces: tuple[NFace, ...]
    face_of: dict[int, tuple[int, ...]]          # face id -> boundary sub-face ids
    face_by_signature: dict[tuple, int]          # (span, sides) -> face id
    superfaces: dict[int, tuple[int, ...]]       # face id -> faces containing it

    @property
    def num_vefs(self) -> int:
        return len(self.nfaces)

    def faces_of_dim(self, n: int):
        return [f for f in self.nfaces if f.ndim == n]

    def face_id(self, span: tuple[int, ...], sides: tuple[int, ...]) -> int:
        return self.face_by_signature[(span, sides)]


def _face_box(dim: int, span, sides) -> Box:
    lo, hi = [0] * dim, [0] * dim
    side_it = iter(sides)
    for ax in range(dim):
        if ax in span:
            lo[ax], hi[ax] = 0, 2
        else:
            s = next(side_it)
            lo[ax] = hi[ax] = 2 * s
    return tuple(lo), tuple(hi)


@lru_cache(maxsize=None)
def enumerate_nfaces(dim: int) -> RefTopology:
    """Build the complete n-face table of the d-cube, 0 <= n < d."""
    if dim not in (2, 3):
        raise ValueError(f"unsupported dimension {dim}")
    faces: list[NFace] = []
    signature: dict[tuple, int] = {}
    for n in range(dim):
        for span in itertools.combinations(range(dim), n):
            free_axes = [ax for ax in range(dim) if ax not in span]
            # z-order over side tuples: first free axis varies fastest
            for code in range(1 << len(free_axes)):
                sides = tuple((code >> i) & 1 for i in range(len(free_axes)))
                fid = len(faces)
                box = _face_box(dim, span, sides)
                faces.append(NFace(fid, n, span, sides, (), box))
                signature[(span, sides)] = fid
    # attach vertex index sets and boundary sub-faces now that ids are fixed
    verts = [f for f in faces if f.ndim == 0]
    final: list[NFace] = []
    face_of: dict[int, tuple[int, ...]] = {}
    superfaces: dict[int, tuple[int, ...]] = {}
    for f in faces:
        vids = tuple(v.id for v in verts if box_contains(f.box, v.box))
        final.append(NFace(f.id, f.ndim, f.span, f.sides, vids, f.box))
        face_of[f.id] = tuple(g.id for g in faces
                              if g.ndim < f.ndim and box_contains(f.box, g.box))
        superfaces[f.id] = tuple(g.id for g in faces
                                 if box_contains(g.box, f.box))
    return RefTopology(dim, tuple(final), face_of, signature, superfaces)


@dataclass(frozen=True)
class RefinementRule:
    """Isotropic 1:2^d refinement with z-ordered children.

    ``owner_table[(child, face)]`` is the parent n-face whose open set contains
    the child's n-face, or PARENT_INTERIOR when the child face lies in the
    parent's open interior.
    """
    dim: int
    num_children: int
    child_anchor: tuple[tuple[int, ...], ...]
    owner_table: dict[tuple[int, int], int]


def _child_face_box(anchor, face: NFace, dim: int) -> Box:
    # child is the unit box at `anchor` on the [0,2]^d lattice; its face box
    # is the reference face box halved and translated
    lo = tuple(anchor[ax] + face.box[0][ax] // 2 for ax in range(dim))
    hi = tuple(anchor[ax] + face.box[1][ax] // 2 for ax in range(dim))
    return lo, hi


@lru_cache(maxsize=None)
def refinement_rule(dim: int) -> RefinementRule:
    topo = enumerate_nfaces(dim)
    anchors = tuple(tuple((c >> ax) & 1 for ax in range(dim))
                    for c in range(1 << dim))
    owner: dict[tuple[int, int], int] = {}
    for child, anchor in enumerate(anchors):
        for face in topo.nfaces:
            cbox = _child_face_box(anchor, face, dim)
            hits = [p.id for p in topo.nfaces if open_box_contains(p.box, cbox)]
            if not hits:
                owner[(child, face.id)] = PARENT_INTERIOR
            else:
                assert len(hits) == 1, "owner n-face must be unique"
                owner[(child, face.id)] = hits[0]
    return RefinementRule(dim, 1 << dim, anchors, owner)


def owner_nface(rule: RefinementRule, child: int, face: int) -> int:
    """Parent n-face owning the given child n-face (PARENT_INTERIOR if none)."""
    return rule.owner_table[(child, face)]
