"""Shared pipeline builder: forest -> views -> meshes -> DOFs -> systems."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from forestfem.assembly import (assemble_fully, assemble_subassembled,
                                cg_solve_fully, cg_solve_subassembled)
from forestfem.dofdist import (build_comm_pattern, compute_ownership,
                               global_numbering)
from forestfem.femesh import build_femesh, complete_ghost_neighbors
from forestfem.fespace import build_constraints, enumerate_dofs, make_lagrangian
from forestfem.forest import Forest, _equal_cuts, ghost
from forestfem.simfabric import Fabric


@dataclass
class Stack:
    forest: Forest
    fabric: Fabric
    views: list
    meshes: list
    fe: object
    dofmaps: list
    constraints: list
    owns: list = field(default_factory=list)
    patterns: list = field(default_factory=list)
    gids: list = field(default_factory=list)
    offsets: list = field(default_factory=list)
    systems: list = field(default_factory=list)

    def canonical(self, p, g):
        dm = self.dofmaps[p]
        vid = dm.dof_vef[g]
        if vid is None:
            return ("cell", dm.dof_point[g], dm.dof_slot[g])
        return ("vef", self.meshes[p].vefs[vid].box, dm.dof_slot[g])

    def global_by_key(self, vectors):
        """Collate per-rank vectors into {canonical dof key: value}."""
        out = {}
        for p, (dm, x) in enumerate(zip(self.dofmaps, vectors)):
            for g in range(dm.num_dofs):
                if dm.local[g]:
                    key = self.canonical(p, g)
                    if key in out:
                        assert abs(out[key] - x[g]) < 1e-9, key
                    else:
                        out[key] = x[g]
        return out


def build_stack(forest: Forest, ranks: int, degree: int, k: int, s: int = 0,
                f_rhs=None, assemble: bool = False) -> Stack:
    forest = Forest(forest.conn, forest.leaves,
                    _equal_cuts(forest.num_leaves, ranks), forest.payload)
    views = ghost(forest, s)
    fabric = Fabric(ranks)
    complete_ghost_neighbors(views, fabric)
    meshes = [build_femesh(v, k) for v in views]
    fe = make_lagrangian(forest.dim, degree)
    dms = [enumerate_dofs(m, fe) for m in meshes]
    css = [build_constraints(m, fe, dm) for m, dm in zip(meshes, dms)]
    st = Stack(forest, fabric, views, meshes, fe, dms, css)
    st.owns = compute_ownership(meshes, dms, fabric)
    st.patterns = [build_comm_pattern(o, d) for o, d in zip(st.owns, dms)]
    st.gids, st.offsets = global_numbering(st.owns, dms, st.patterns, fabric)
    if assemble:
        rhs = f_rhs if f_rhs is not None else (lambda p: 1.0)
        st.systems = [assemble_subassembled(m, fe, dm, cs, rhs)
                      for m, dm, cs in zip(meshes, dms, css)]
    return st


def solve_both_modes(st: Stack, tol=1e-12):
    xs_sub, it_sub = cg_solve_subassembled(
        st.systems, st.patterns, st.owns, st.fabric, tol=tol)
    fulls = assemble_fully(st.systems, st.gids, st.offsets, st.fabric)
    xs_full, it_full = cg_solve_fully(fulls, st.fabric, tol=tol)
    return xs_sub, xs_full, fulls, it_sub, it_full
