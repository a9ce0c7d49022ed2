"""Outer mesh layer: per-rank construction of the FE-suitable adaptive mesh.

Each rank glues the local VEFs of its cells (local + ghost) into proc-local
global-VEF equivalence classes, assembles the cells-around and coarser-cells-
around sets from restricted neighbor queries, detects hanging VEFs, resolves
their owner VEFs with a single level of recursion, and classifies every VEF
as proc-regular/proc-hanging, local/ghost and interface/interior.

The build is communication free: ghost-cell neighbor tables must have been
filled beforehand by ``complete_ghost_neighbors`` (one exchange round).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .boxes import Box, box_contains, open_box_contains
from .forest import Forest, RankView, neighbors_of
from .morton import MortonKey, sfc_index
from .simfabric import Fabric, exchange_cell_payloads


class MeshBuildError(RuntimeError):
    pass


class UnmatchedEquivalenceError(MeshBuildError):
    """No matching local VEF found where Def. 2.5 requires one."""


class OwnerRecursionError(MeshBuildError):
    """Owner-VEF recursion exceeded depth 1: the balance precondition of the
    build (2:1 k-balance with matching ghosts) does not hold."""


@dataclass
class GlobalVef:
    id: int
    ndim: int
    box: Box
    cells_around: list[MortonKey]
    coarser_around: list[MortonKey]
    hanging: bool
    owner: int | None = None
    local: bool = False
    interface: bool = False


@dataclass
class FEMesh:
    rank: int
    k: int
    view: RankView
    vefs: list[GlobalVef]
    cell_vefs: dict[MortonKey, dict[int, int]]
    by_box: dict[Box, int]
    deep_hanging: list[int] = field(default_factory=list)

    @property
    def proc_regular(self):
        return [v.id for v in self.vefs if not v.hanging]

    @property
    def proc_hanging(self):
        return [v.id for v in self.vefs if v.hanging]

    @property
    def local_vefs(self):
        return [v.id for v in self.vefs if v.local]

    @property
    def ghost_vefs(self):
        return [v.id for v in self.vefs if not v.local]

    @property
    def interface_vefs(self):
        return [v.id for v in self.vefs if v.local and v.interface]

    @property
    def interior_vefs(self):
        return [v.id for v in self.vefs if v.local and not v.interface]

    def vef_of(self, key: MortonKey, fid: int) -> GlobalVef:
        return self.vefs[self.cell_vefs[key][fid]]

    def boundary_subvefs(self, vef: GlobalVef) -> list[int]:
        """Materialized VEFs lying on the boundary of the closed VEF."""
        out = []
        for key in vef.cells_around:
            for fid, vid in self.cell_vefs[key].items():
                sub = self.vefs[vid]
                if sub.id != vef.id and sub.ndim < vef.ndim and \
                        box_contains(vef.box, sub.box):
                    out.append(vid)
        return sorted(set(out))

    def debug_dump(self) -> str:
        rows = [{"id": v.id, "dim": v.ndim,
                 "hanging": v.hanging, "local": v.local,
                 "interface": bool(v.local and v.interface),
                 "n_cells_around": len(v.cells_around),
                 "n_coarser_around": len(v.coarser_around),
                 "owner": v.owner}
                for v in self.vefs]
        return json.dumps(rows)


def vef_filter(ndim: int, k: int) -> bool:
    """Alg. 1 line-4 filter: materialize 0-faces only for k <= 1, and any
    n-face with n >= k."""
    return (ndim == 0 and k <= 1) or ndim >= k


def complete_ghost_neighbors(views: list[RankView], fabric: Fabric):
    """One exchange round shipping, for every ghost cell, its neighbor sets
    as computed at the owner rank.  Receivers restrict the sets to their own
    view; afterwards Alg. 1 can run with no communication at all."""
    forest = views[0].forest
    topo = forest.topo
    payloads = []
    for view in views:
        per_cell = {}
        for key in view.mirror_targets:
            per_cell[key] = {fid: neighbors_of(forest, key, fid)
                             for fid in range(topo.num_vefs)}
        payloads.append(per_cell)
    received = exchange_cell_payloads(fabric, views, payloads)
    for view, cells in zip(views, received):
        for key, table in cells.items():
            view.install_ghost_neighbors(key, table)
    for view in views:
        if not view.ghost_complete:
            raise MeshBuildError(
                f"rank {view.rank}: ghost completion round left gaps")


def build_femesh(view: RankView, k: int, strict: bool = True) -> FEMesh:
    """Run Alg. 1 for one rank.

    Preconditions: the global forest is 2:1 k-balanced and the view carries
    ghosts for n-faces with n >= s per Def. 3.8 (s <= k), with ghost
    neighbor tables completed.  Under those conditions the owner recursion
    has depth exactly one; a deeper chain raises OwnerRecursionError when
    ``strict`` (the default), else it is recorded in ``deep_hanging``.
    """
    forest = view.forest
    if view.ghost_owner and not view.ghost_complete:
        raise MeshBuildError("ghost neighbor tables not completed; "
                             "run complete_ghost_neighbors first")
    topo = forest.topo
    mesh = FEMesh(view.rank, k, view, [], {}, {})
    cells = view.cells()
    face_boxes: dict[MortonKey, list[Box]] = {}
    neighbor_memo: dict[tuple[MortonKey, int], object] = {}

    def boxes_of(key):
        fb = face_boxes.get(key)
        if fb is None:
            fb = [forest.face_box(key, fid) for fid in range(topo.num_vefs)]
            face_boxes[key] = fb
        return fb

    def nbrs(key, gid):
        sets = neighbor_memo.get((key, gid))
        if sets is None:
            sets = view.neighbors(key, gid)
            neighbor_memo[(key, gid)] = sets
        return sets

    def find_face(key, box):
        for fid, fb in enumerate(boxes_of(key)):
            if fb == box:
                return fid
        return None

    def assign(key, fid, vid):
        mesh.cell_vefs.setdefault(key, {})[fid] = vid

    def materialize(key: MortonKey, fid: int, depth: int) -> int:
        fbox = boxes_of(key)[fid]
        assert fbox not in mesh.by_box, "class exists but slot was unassigned"
        vid = len(mesh.vefs)
        mesh.by_box[fbox] = vid
        assign(key, fid, vid)
        face = topo.nfaces[fid]
        around: dict[MortonKey, None] = {key: None}
        coarser: dict[MortonKey, None] = {}
        for gid in topo.superfaces[fid]:
            sets = nbrs(key, gid)
            for e in sets.conformal:
                mfid = find_face(e.key, fbox)
                if mfid is None:
                    raise UnmatchedEquivalenceError(
                        f"rank {view.rank}: no VEF of {e.key} matches {fbox}")
                assign(e.key, mfid, vid)
                around[e.key] = None
            if face.ndim == 0:
                for e in sets.higher:
                    mfid = find_face(e.key, fbox)
                    if mfid is not None:
                        assign(e.key, mfid, vid)
                        around[e.key] = None
            for e in sets.lower:
                mfid = find_face(e.key, fbox)
                if mfid is not None:
                    if face.ndim == 0:
                        assign(e.key, mfid, vid)
                        around[e.key] = None
                else:
                    coarser[e.key] = None
        order = lambda c: (c.tree, sfc_index(c))
        vef = GlobalVef(vid, face.ndim, fbox,
                        sorted(around, key=order), sorted(coarser, key=order),
                        hanging=bool(coarser))
        mesh.vefs.append(vef)
        if vef.hanging:
            if depth >= 1:
                mesh.deep_hanging.append(vid)
                if strict:
                    raise OwnerRecursionError(
                        f"rank {view.rank}: owner of hanging VEF {fbox} is "
                        f"itself hanging (recursion depth > 1)")
                return vid
            # the owner VEF is the unique n-face of a coarser neighbor whose
            # open set contains f; we fix the lowest-SFC neighbor for
            # determinism (the choice is free)
            holder = vef.coarser_around[0]
            hfid = None
            for cand_fid, cand_box in enumerate(boxes_of(holder)):
                if cand_box != fbox and open_box_contains(cand_box, fbox):
                    hfid = cand_fid
                    break
            if hfid is None:
                raise UnmatchedEquivalenceError(
                    f"rank {view.rank}: no owner VEF for hanging {fbox} on "
                    f"coarser neighbor {holder}")
            obox = boxes_of(holder)[hfid]
            ovid = mesh.by_box.get(obox)
            if ovid is None:
                ovid = materialize(holder, hfid, depth + 1)
            vef.owner = ovid
        return vid

    for key in cells:
        for fid in range(topo.num_vefs):
            if not vef_filter(topo.nfaces[fid].ndim, k):
                continue
            if fid not in mesh.cell_vefs.get(key, ()):
                box = boxes_of(key)[fid]
                existing = mesh.by_box.get(box)
                if existing is not None:
                    # class created from a cell this one is not adjacent to
                    # (possible only around low-dim contacts); just glue
                    assign(key, fid, existing)
                    vef = mesh.vefs[existing]
                    if key not in vef.cells_around:
                        vef.cells_around.append(key)
                        vef.cells_around.sort(key=lambda c: (c.tree, sfc_index(c)))
                    continue
                materialize(key, fid, 0)

    _classify_local_and_interface(mesh)
    return mesh


def _classify_local_and_interface(mesh: FEMesh):
    """Def. 3.9 cases (a)-(d) plus the interface/interior split of F_L^p."""
    view = mesh.view
    for vef in mesh.vefs:
        has_local = any(view.is_local(c) for c in vef.cells_around)
        coarser_local = any(view.is_local(c) for c in vef.coarser_around)
        vef.local = has_local or coarser_local          # cases (a) and (b)
    changed = True
    while changed:
        changed = False
        for vef in mesh.vefs:
            if vef.hanging and vef.local and vef.owner is not None:
                owner = mesh.vefs[vef.owner]
                targets = [owner.id] + mesh.boundary_subvefs(owner)
                for vid in targets:                      # cases (c) and (d)
                    if not mesh.vefs[vid].local:
                        mesh.vefs[vid].local = True
                        changed = True
    # interface: shared with another rank.  A VEF with a ghost cell around it
    # (or around its coarser set) is shared; owners of interface hanging VEFs
    # and their closures are shared through the constraints (Def. 3.9 (c)/(d)).
    for vef in mesh.vefs:
        ghostly = any(not view.is_local(c)
                      for c in vef.cells_around + vef.coarser_around)
        vef.interface = vef.local and ghostly
    changed = True
    while changed:
        changed = False
        for vef in mesh.vefs:
            if vef.hanging and vef.local and vef.interface and vef.owner is not None:
                owner = mesh.vefs[vef.owner]
                for vid in [owner.id] + mesh.boundary_subvefs(owner):
                    sub = mesh.vefs[vid]
                    if sub.local and not sub.interface:
                        sub.interface = True
                        changed = True


# -- serial geometric oracle ----------------------------------------------------


@dataclass
class OracleVef:
    ndim: int
    box: Box
    cells_around: set
    coarser_around: set
    owners: set  # owner VEF boxes as seen from each coarser cell

    @property
    def hanging(self):
        return bool(self.coarser_around)


def oracle_global_vefs(forest: Forest) -> dict[Box, OracleVef]:
    """Brute-force global VEF table from closed-hull intersection tests on
    anchor boxes; no neighbor queries involved.  Desk-scale only."""
    import numpy as np

    topo = forest.topo
    keys = list(forest.iter_leaves())
    lo = np.array([forest.cell_box(key)[0] for key in keys], dtype=np.int64)
    hi = np.array([forest.cell_box(key)[1] for key in keys], dtype=np.int64)
    vefs: dict[Box, OracleVef] = {}
    for key in keys:
        for face in topo.nfaces:
            box = forest.face_box(key, face.id)
            v = vefs.get(box)
            if v is None:
                v = OracleVef(face.ndim, box, set(), set(), set())
                vefs[box] = v
            v.cells_around.add(key)
    for box, v in vefs.items():
        flo = np.asarray(box[0], dtype=np.int64)
        fhi = np.asarray(box[1], dtype=np.int64)
        mask = np.all(lo <= flo, axis=1) & np.all(hi >= fhi, axis=1)
        for i in np.nonzero(mask)[0]:
            key = keys[i]
            if key in v.cells_around:
                continue
            v.coarser_around.add(key)
            for face in topo.nfaces:
                obox = forest.face_box(key, face.id)
                if open_box_contains(obox, box):
                    v.owners.add(obox)
                    break
    return vefs
