import itertools

import pytest

from forestfem.boxes import box_contains, open_box_contains
from forestfem.polytope import (PARENT_INTERIOR, enumerate_nfaces, owner_nface,
                                refinement_rule)


def test_counts_2d():
    topo = enumerate_nfaces(2)
    assert len(topo.faces_of_dim(0)) == 4
    assert len(topo.faces_of_dim(1)) == 4
    for e in topo.faces_of_dim(1):
        assert len(e.vertices) == 2


def test_counts_3d():
    topo = enumerate_nfaces(3)
    assert len(topo.faces_of_dim(0)) == 8
    assert len(topo.faces_of_dim(1)) == 12
    assert len(topo.faces_of_dim(2)) == 6
    for f in topo.faces_of_dim(2):
        sub = topo.face_of[f.id]
        assert sum(1 for s in sub if topo.nfaces[s].ndim == 1) == 4
        assert sum(1 for s in sub if topo.nfaces[s].ndim == 0) == 4


def test_unsupported_dim():
    with pytest.raises(ValueError):
        enumerate_nfaces(4)


def test_every_edge_on_two_faces_3d():
    # exhaustive incidence count over the enumerated topology
    topo = enumerate_nfaces(3)
    count = {e.id: 0 for e in topo.faces_of_dim(1)}
    for f in topo.faces_of_dim(2):
        for s in topo.face_of[f.id]:
            if topo.nfaces[s].ndim == 1:
                count[s] += 1
    assert all(c == 2 for c in count.values())


def test_boundary_partition():
    # every boundary lattice point (at the doubly refined resolution) lies in
    # exactly one open n-face
    for dim in (2, 3):
        topo = enumerate_nfaces(dim)
        for pt in itertools.product((0, 1, 2), repeat=dim):
            if all(0 < c < 2 for c in pt):
                continue
            box = (pt, pt)
            hits = [f.id for f in topo.nfaces if open_box_contains(f.box, box)]
            assert len(hits) == 1


def test_subfaces_are_faces_of_cell():
    # n-faces of an n-face of the cell are n-faces of the cell
    for dim in (2, 3):
        topo = enumerate_nfaces(dim)
        ids = {f.id for f in topo.nfaces}
        for f in topo.nfaces:
            assert set(topo.face_of[f.id]) <= ids


def test_owner_corner_and_interior_2d():
    rule = refinement_rule(2)
    topo = enumerate_nfaces(2)
    # child 0 vertex at the parent anchor -> parent vertex 0
    v_anchor = topo.face_id((), (0, 0))
    assert owner_nface(rule, 0, v_anchor) == topo.face_id((), (0, 0))
    # child 0 vertex at the parent center -> interior
    v_center = topo.face_id((), (1, 1))
    assert owner_nface(rule, 0, v_center) == PARENT_INTERIOR


def test_owner_table_total_and_geometric():
    # brute-force point-in-n-face check on reference coordinates
    from forestfem.polytope import _child_face_box
    for dim in (2, 3):
        rule = refinement_rule(dim)
        topo = enumerate_nfaces(dim)
        for child in range(rule.num_children):
            anchor = rule.child_anchor[child]
            for face in topo.nfaces:
                owner = owner_nface(rule, child, face.id)
                cbox = _child_face_box(anchor, face, dim)
                if owner == PARENT_INTERIOR:
                    assert not any(open_box_contains(p.box, cbox)
                                   for p in topo.nfaces)
                else:
                    pbox = topo.nfaces[owner].box
                    assert open_box_contains(pbox, cbox)
                    assert box_contains(pbox, cbox)
                    assert topo.nfaces[owner].ndim >= face.ndim


def test_children_tile_parent():
    for dim in (2, 3):
        rule = refinement_rule(dim)
        assert rule.num_children == 2 ** dim
        cells = set(rule.child_anchor)
        assert cells == set(itertools.product((0, 1), repeat=dim))


def test_child_mesh_partitions_parent_faces():
    # restriction of the child mesh to any parent n-face with n > 0 is a
    # non-trivial partition of it
    for dim in (2, 3):
        rule = refinement_rule(dim)
        topo = enumerate_nfaces(dim)
        for pface in topo.nfaces:
            if pface.ndim == 0:
                continue
            owners = [(c, f.id) for c in range(rule.num_children)
                      for f in topo.nfaces
                      if owner_nface(rule, c, f.id) == pface.id]
            same_dim = [x for x in owners
                        if topo.nfaces[x[1]].ndim == pface.ndim]
            assert len(same_dim) == 2 ** pface.ndim  # subdivided, non-trivial
