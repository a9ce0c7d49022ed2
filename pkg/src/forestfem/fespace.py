"""Conforming Lagrangian FE spaces Q_r (r in {1, 2}) on the outer mesh layer:
proc-local DOF enumeration, cell-local to proc-local maps, and hanging-DOF
constraints with runtime-checked locality.

DOFs are equivalence classes of cell-local nodes glued through the pair
(global VEF, within-VEF slot); cell-interior nodes stay cell-private.  A
hanging DOF is constrained by the DOFs of its owner VEF's closure, with
nodal-interpolation coefficients: the value of each master's shape function
(on a coarse holder cell) at the hanging node.  Under a 2:1 k-balance with
matching ghosts and k <= max(1, D) all masters are regular and in reach;
the builder verifies this instead of assuming it, and raises when a master
is proc-hanging or its neighborhood escapes the rank view.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .boxes import box_contains
from .femesh import FEMesh, GlobalVef
from .morton import sfc_index

LAGRANGIAN = "lagrangian"


class FESpaceError(RuntimeError):
    pass


class BalanceTooCoarseError(FESpaceError):
    """The mesh was built with a k larger than max(1, D) admits: hanging
    constraint locality is not guaranteed (see build_constraints)."""


class ConstraintLocalityError(FESpaceError):
    """A hanging-DOF constraint could not be resolved from rank-local data."""


class ConstraintNotDirectError(ConstraintLocalityError):
    """A constraint master is itself hanging (non-direct constraint chain)."""


def lagrange_basis_1d(degree: int):
    """Equispaced 1D Lagrange basis: values and derivatives as callables."""
    nodes = np.linspace(0.0, 1.0, degree + 1)

    def value(i, x):
        out = 1.0
        for j, nj in enumerate(nodes):
            if j != i:
                out *= (x - nj) / (nodes[i] - nj)
        return out

    def deriv(i, x):
        out = 0.0
        for m, nm in enumerate(nodes):
            if m == i:
                continue
            term = 1.0 / (nodes[i] - nm)
            for j, nj in enumerate(nodes):
                if j != i and j != m:
                    term *= (x - nj) / (nodes[i] - nj)
            out += term
        return out

    return value, deriv


@dataclass(frozen=True)
class FEDescriptor:
    """Tensor-product Lagrangian element of degree r on the d-cube."""
    dim: int
    degree: int
    family: str = LAGRANGIAN

    @property
    def nodes_per_axis(self) -> int:
        return self.degree + 1

    @property
    def num_nodes(self) -> int:
        return self.nodes_per_axis ** self.dim

    @property
    def lowest_dof_dim(self) -> int:
        # vertices own DOFs for every Lagrangian degree
        return 0

    def node_tuple(self, idx: int) -> tuple[int, ...]:
        n = self.nodes_per_axis
        return tuple((idx // n ** ax) % n for ax in range(self.dim))

    def node_index(self, t) -> int:
        n = self.nodes_per_axis
        return sum(c * n ** ax for ax, c in enumerate(t))

    def node_owner(self, topo, t):
        """(face id | None, slot): the n-face owning the node, None for the
        cell interior.  Slots order multiple within-VEF DOFs lexicographically
        by interior coordinate (a single slot for r <= 2)."""
        r = self.degree
        span = tuple(ax for ax, c in enumerate(t) if 0 < c < r)
        sides = tuple(t[ax] // r for ax in range(self.dim) if ax not in span)
        slot = 0
        for pos, ax in enumerate(span):
            slot += (t[ax] - 1) * (r - 1) ** pos
        if len(span) == self.dim:
            return None, slot
        return topo.face_id(span, sides), slot

    def dofs_per_nface(self, n: int) -> int:
        return (self.degree - 1) ** n if self.degree > 1 or n == 0 else 0

    def shape_value(self, t, xi) -> float:
        val, _ = lagrange_basis_1d(self.degree)
        out = 1.0
        for ax in range(self.dim):
            out *= val(t[ax], xi[ax])
        return out

    def shape_grad(self, t, xi):
        val, der = lagrange_basis_1d(self.degree)
        grad = []
        for gax in range(self.dim):
            g = 1.0
            for ax in range(self.dim):
                g *= der(t[ax], xi[ax]) if ax == gax else val(t[ax], xi[ax])
            grad.append(g)
        return np.array(grad)


def make_lagrangian(dim: int, degree: int) -> FEDescriptor:
    if degree not in (1, 2):
        raise ValueError("only Q1 and Q2 are supported")
    return FEDescriptor(dim, degree)


@dataclass
class DofMap:
    """Proc-local DOF numbering plus per-DOF classification flags."""
    fe: FEDescriptor
    mesh: FEMesh
    cell_dofs: dict = field(default_factory=dict)     # key -> list[int], node order
    dof_vef: list = field(default_factory=list)       # vef id | None per dof
    dof_slot: list = field(default_factory=list)
    dof_point: list = field(default_factory=list)     # nodal point, global ints
    local: list = field(default_factory=list)
    hanging: list = field(default_factory=list)
    interface: list = field(default_factory=list)

    @property
    def num_dofs(self) -> int:
        return len(self.dof_vef)

    def ids(self, *, local=None, hanging=None, interface=None):
        out = []
        for g in range(self.num_dofs):
            if local is not None and self.local[g] != local:
                continue
            if hanging is not None and self.hanging[g] != hanging:
                continue
            if interface is not None and self.interface[g] != interface:
                continue
            out.append(g)
        return out

    def debug_dump(self) -> str:
        import json
        return json.dumps([
            {"dof": g, "vef": self.dof_vef[g], "slot": self.dof_slot[g],
             "local": self.local[g], "hanging": self.hanging[g],
             "interface": self.interface[g]}
            for g in range(self.num_dofs)])


def enumerate_dofs(mesh: FEMesh, fe: FEDescriptor) -> DofMap:
    """Glue cell-local nodes into proc-local DOFs over T^p.

    Refuses meshes whose build filter k exceeds max(1, D): such meshes do
    not materialize the VEFs this space puts DOFs on, and the constraint
    locality guarantee would not hold anyway.
    """
    if mesh.k > max(1, fe.lowest_dof_dim):
        raise BalanceTooCoarseError(
            f"mesh built with k={mesh.k} but the FE space requires "
            f"k <= {max(1, fe.lowest_dof_dim)}; hanging constraints would "
            f"not be locally resolvable")
    topo = mesh.view.forest.topo
    dm = DofMap(fe, mesh)
    by_class: dict = {}
    owners = [fe.node_owner(topo, fe.node_tuple(i)) for i in range(fe.num_nodes)]
    tuples = [fe.node_tuple(i) for i in range(fe.num_nodes)]
    for key in mesh.view.cells():
        lo, hi = mesh.view.forest.cell_box(key)
        size = hi[0] - lo[0]
        step = size // fe.degree
        ids = []
        for (fid, slot), t in zip(owners, tuples):
            if fid is None:
                ck = ("cell", key, slot)
            else:
                vid = mesh.cell_vefs[key].get(fid)
                if vid is None:
                    raise FESpaceError(
                        f"VEF {fid} of {key} not materialized (mesh k too large)")
                ck = ("vef", vid, slot)
            g = by_class.get(ck)
            if g is None:
                g = dm.num_dofs
                by_class[ck] = g
                point = tuple(lo[ax] + t[ax] * step for ax in range(fe.dim))
                dm.dof_point.append(point)
                dm.dof_slot.append(slot)
                if fid is None:
                    dm.dof_vef.append(None)
                    dm.local.append(mesh.view.is_local(key))
                    dm.hanging.append(False)
                    dm.interface.append(False)
                else:
                    vef = mesh.vefs[vid]
                    dm.dof_vef.append(vid)
                    dm.local.append(vef.local)
                    dm.hanging.append(vef.hanging)
                    dm.interface.append(vef.local and vef.interface)
            ids.append(g)
        dm.cell_dofs[key] = ids
    return dm


@dataclass
class ConstraintSet:
    """Per hanging local DOF: masters and interpolation weights (zero
    inhomogeneity)."""
    masters: dict[int, list[tuple[int, float]]] = field(default_factory=dict)

    def __contains__(self, g):
        return g in self.masters

    def __getitem__(self, g):
        return self.masters[g]

    def items(self):
        return self.masters.items()

    def __len__(self):
        return len(self.masters)


def _holder_cell(mesh: FEMesh, vef: GlobalVef):
    return min(vef.cells_around, key=lambda c: (c.tree, sfc_index(c)))


def _require_regular_master(mesh: FEMesh, vef: GlobalVef, what: str):
    if vef.hanging:
        # honest completion attempt: certifying this VEF regular needs the
        # cells around it; if any is outside the view the guard fires, else
        # the chain is genuinely non-direct
        mesh.view.complete_cells_around(vef.box)
        raise ConstraintNotDirectError(
            f"rank {mesh.rank}: {what} {vef.box} is itself hanging; "
            f"constraint chain is not direct")


def build_constraints(mesh: FEMesh, fe: FEDescriptor, dofs: DofMap) -> ConstraintSet:
    """Hanging-DOF constraints for all hanging DOFs local to this rank.

    Masters are the owner-VEF closure DOFs of a coarse holder cell, with
    coefficients equal to the holder's shape functions evaluated at the
    hanging node.  Every master must be proc-regular; violations raise
    ConstraintNotDirectError (or ViewGuardError when certification needs
    off-view cells), which is the locality witness of the whole layer.
    """
    cs = ConstraintSet()
    forest = mesh.view.forest
    for g in range(dofs.num_dofs):
        if not (dofs.hanging[g] and dofs.local[g]):
            continue
        vef = mesh.vefs[dofs.dof_vef[g]]
        if vef.owner is None:
            mesh.view.complete_cells_around(vef.box)
            raise ConstraintLocalityError(
                f"rank {mesh.rank}: hanging VEF {vef.box} has no resolved owner")
        owner = mesh.vefs[vef.owner]
        _require_regular_master(mesh, owner, "owner VEF")
        holder = _holder_cell(mesh, owner)
        lo, hi = forest.cell_box(holder)
        size = hi[0] - lo[0]
        point = dofs.dof_point[g]
        xi = [(point[ax] - lo[ax]) / size for ax in range(fe.dim)]
        entries = []
        for idx, master in enumerate(dofs.cell_dofs[holder]):
            pt = dofs.dof_point[master]
            if not box_contains(owner.box, (pt, pt)):
                continue
            coeff = fe.shape_value(fe.node_tuple(idx), xi)
            if abs(coeff) < 1e-13:
                continue
            mvid = dofs.dof_vef[master]
            if mvid is None:
                raise ConstraintLocalityError(
                    f"rank {mesh.rank}: interior master for hanging DOF {g}")
            _require_regular_master(mesh, mesh.vefs[mvid], "master VEF")
            entries.append((master, coeff))
        if not entries:
            raise ConstraintLocalityError(
                f"rank {mesh.rank}: empty master set for hanging DOF {g}")
        cs.masters[g] = entries
    return cs
