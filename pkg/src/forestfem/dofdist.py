"""Distributed DOF semantics: processor ownership and sharer sets for
proc-regular interface DOFs, send/receive communication patterns, the
two-stage subdomain-wise interface assembly (S1: non-owners send partial
sums, owners reduce; S2: owners broadcast assembled values), and the global
DOF numbering with per-owner consecutive ranges.

Ownership follows the max-rank rule: the owner of a DOF is the highest rank
owning a cell around its VEF.  Pairing identifiers are derived from the
anchor cell (the cell of maximal global index around the VEF) and the node
slot inside it, which every rank with a local cell around the VEF computes
identically without communication; ranks without a local cell around fetch
owner and identifier in the single exchange round.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .femesh import FEMesh
from .fespace import DofMap
from .simfabric import Fabric, exchange_cell_payloads

SENTINEL = None


@dataclass
class Ownership:
    rank: int
    owner: dict[int, int] = field(default_factory=dict)
    sharers: dict[int, set] = field(default_factory=dict)
    gid_pair: dict[int, tuple] = field(default_factory=dict)
    owned: list[int] = field(default_factory=list)
    # sharer estimates after the local stage, before the exchange round
    sharers_local: dict[int, frozenset] = field(default_factory=dict)

    def owner_of(self, g: int) -> int:
        return self.owner[g]

    def sharers_of(self, g: int) -> set:
        return self.sharers.get(g, {self.rank})


@dataclass
class CommPattern:
    rank: int
    rcv_ranks: list[int] = field(default_factory=list)
    rcv_dofs: dict[int, list[int]] = field(default_factory=dict)
    snd_ranks: list[int] = field(default_factory=list)
    snd_dofs: dict[int, list[int]] = field(default_factory=dict)

    def swapped(self) -> "CommPattern":
        """The S2 pattern: send and receive sides exchanged."""
        return CommPattern(self.rank, list(self.snd_ranks), dict(self.snd_dofs),
                           list(self.rcv_ranks), dict(self.rcv_dofs))

    def debug_dump(self) -> str:
        import json
        return json.dumps({
            "rank": self.rank,
            "rcv": {q: len(v) for q, v in self.rcv_dofs.items()},
            "snd": {q: len(v) for q, v in self.snd_dofs.items()}})


def _vef_dofs(dofs: DofMap):
    out: dict[int, list[int]] = {}
    for g, vid in enumerate(dofs.dof_vef):
        if vid is not None:
            out.setdefault(vid, []).append(g)
    return out


def _cell_owner(mesh: FEMesh, key) -> int:
    view = mesh.view
    return view.rank if view.is_local(key) else view.ghost_owner[key]


def _anchor_pair(mesh: FEMesh, dofs: DofMap, vid: int, g: int):
    """(owner rank, pairing id) from the maximal-index cell around the VEF."""
    forest = mesh.view.forest
    vef = mesh.vefs[vid]
    anchor = max(vef.cells_around, key=forest.global_index)
    slot = dofs.cell_dofs[anchor].index(g)
    return _cell_owner(mesh, anchor), (forest.global_index(anchor), slot)


def compute_ownership(meshes: list[FEMesh], dofmaps: list[DofMap],
                      fabric: Fabric) -> list[Ownership]:
    """Ownership and sharer sets for proc-regular interface DOFs; exactly one
    nearest-neighbor exchange round.  Sharer sets are complete where the rank
    is the owner; owners and pairing ids are complete everywhere."""
    ranks = len(meshes)
    owns = [Ownership(p) for p in range(ranks)]
    vef_dof_maps = [_vef_dofs(dm) for dm in dofmaps]

    # local stage: walk interface VEFs, accumulate sharers from surrounding
    # cell owners, fix owner + pairing id wherever a local cell is around
    for p, (mesh, dofs) in enumerate(zip(meshes, dofmaps)):
        own = owns[p]
        vdofs = vef_dof_maps[p]
        for vid in mesh.interface_vefs:
            vef = mesh.vefs[vid]
            w = {_cell_owner(mesh, c) for c in vef.cells_around}
            has_local = any(mesh.view.is_local(c) for c in vef.cells_around)
            if not vef.hanging:
                for g in vdofs.get(vid, ()):
                    own.sharers.setdefault(g, set()).update(w)
                    if has_local:
                        rank, pair = _anchor_pair(mesh, dofs, vid, g)
                        own.owner[g] = rank
                        own.gid_pair[g] = pair
            else:
                if vdofs.get(vid) and vef.owner is not None:
                    owner_vef = mesh.vefs[vef.owner]
                    closure = [owner_vef.id] + mesh.boundary_subvefs(owner_vef)
                    for sv in closure:
                        for g in vdofs.get(sv, ()):
                            own.sharers.setdefault(g, set()).update(w)
        # interior local regular DOFs are owned by this rank
        for g in range(dofs.num_dofs):
            if dofs.local[g] and not dofs.hanging[g] and not dofs.interface[g]:
                own.owner[g] = p

    for own in owns:
        own.sharers_local = {g: frozenset(v) for g, v in own.sharers.items()}

    # pack per-(cell, node) buffers for local cells around regular interface
    # VEFs and fetch them on ghost cells
    payloads = []
    for p, (mesh, dofs) in enumerate(zip(meshes, dofmaps)):
        own = owns[p]
        per_cell = {}
        for key in mesh.view.mirror_targets:
            fe = dofs.fe
            buf = [SENTINEL] * fe.num_nodes
            filled = False
            for idx, g in enumerate(dofs.cell_dofs[key]):
                vid = dofs.dof_vef[g]
                if vid is None:
                    continue
                vef = mesh.vefs[vid]
                if vef.hanging or not (vef.local and vef.interface):
                    continue
                buf[idx] = (own.owner.get(g),
                            tuple(sorted(own.sharers.get(g, ()))),
                            own.gid_pair.get(g))
                filled = True
            if filled:
                per_cell[key] = buf
        payloads.append(per_cell)
    received = exchange_cell_payloads(
        fabric, [m.view for m in meshes], payloads)

    # unpack: augment sharers where a local cell is around, adopt owner and
    # pairing id where none is
    for p, (mesh, dofs) in enumerate(zip(meshes, dofmaps)):
        own = owns[p]
        for key, buf in received[p].items():
            for idx, packed in enumerate(buf):
                if packed is SENTINEL:
                    continue
                g = dofs.cell_dofs[key][idx]
                vid = dofs.dof_vef[g]
                if vid is None:
                    continue
                vef = mesh.vefs[vid]
                if vef.hanging or not vef.local:
                    continue
                r_owner, r_sharers, r_pair = packed
                if any(mesh.view.is_local(c) for c in vef.cells_around):
                    own.sharers.setdefault(g, set()).update(r_sharers)
                else:
                    if r_owner is not None:
                        own.owner[g] = r_owner
                    if r_pair is not None:
                        own.gid_pair[g] = r_pair

    # owned DOF list, ordered by pairing id (interior DOFs pair on their own
    # proc-local id; the order only needs to be deterministic per owner)
    for p, (mesh, dofs) in enumerate(zip(meshes, dofmaps)):
        own = owns[p]
        owned = []
        for g in range(dofs.num_dofs):
            if not dofs.local[g] or dofs.hanging[g]:
                continue
            if g not in own.owner:
                raise RuntimeError(
                    f"rank {p}: no owner for local regular DOF {g} after the "
                    f"exchange round")
            if own.owner[g] == p:
                owned.append(g)
        interface_key = {g: own.gid_pair.get(g, (-1, g)) for g in owned}
        owned.sort(key=lambda g: interface_key[g])
        own.owned = owned
    return owns


def build_comm_pattern(own: Ownership, dofs: DofMap) -> CommPattern:
    """S1 pattern: receive sides at owners, send sides at non-owners, DOF
    lists ordered by ascending pairing id so both sides match element-wise."""
    pat = CommPattern(own.rank)
    for g in range(dofs.num_dofs):
        if not dofs.local[g] or dofs.hanging[g] or not dofs.interface[g]:
            continue
        q = own.owner.get(g)
        if q is None:
            continue
        if q == own.rank:
            for other in sorted(own.sharers.get(g, ())):
                if other == own.rank:
                    continue
                pat.rcv_dofs.setdefault(other, []).append(g)
        else:
            pat.snd_dofs.setdefault(q, []).append(g)
    for q in list(pat.rcv_dofs):
        pat.rcv_dofs[q].sort(key=lambda g: own.gid_pair[g])
    for q in list(pat.snd_dofs):
        pat.snd_dofs[q].sort(key=lambda g: own.gid_pair[g])
    pat.rcv_ranks = sorted(pat.rcv_dofs)
    pat.snd_ranks = sorted(pat.snd_dofs)
    return pat


def _pack_floats(vals) -> bytes:
    return struct.pack(f"<{len(vals)}d", *vals)


def _unpack_floats(blob: bytes):
    return struct.unpack(f"<{len(blob) // 8}d", blob)


def assemble_interface(patterns: list[CommPattern], vectors, fabric: Fabric):
    """Transform subassembled vectors into fully-assembled ones: S1 reduces
    partial sums at owners, S2 broadcasts assembled values back.  Two rounds."""
    out = [np.array(v, dtype=float, copy=True) for v in vectors]
    # S1: non-owners -> owners, reduce-sum
    boxes = {}
    for pat, vec in zip(patterns, out):
        for q in pat.snd_ranks:
            boxes[(pat.rank, q)] = [_pack_floats([vec[g] for g in pat.snd_dofs[q]])]
    inbox = fabric.neighbor_exchange(boxes)
    for pat, vec in zip(patterns, out):
        for q in pat.rcv_ranks:
            (blob,) = inbox[(pat.rank, q)]
            for g, val in zip(pat.rcv_dofs[q], _unpack_floats(blob)):
                vec[g] += val
    # S2: owners -> non-owners, overwrite
    boxes = {}
    for pat, vec in zip(patterns, out):
        for q in pat.rcv_ranks:
            boxes[(pat.rank, q)] = [_pack_floats([vec[g] for g in pat.rcv_dofs[q]])]
    inbox = fabric.neighbor_exchange(boxes)
    for pat, vec in zip(patterns, out):
        for q in pat.snd_ranks:
            (blob,) = inbox[(pat.rank, q)]
            for g, val in zip(pat.snd_dofs[q], _unpack_floats(blob)):
                vec[g] = val
    return out


def global_numbering(owns: list[Ownership], dofmaps: list[DofMap],
                     patterns: list[CommPattern], fabric: Fabric):
    """Global ids: per-rank owned counts, exclusive prefix reduction, dense
    owned ranges, then one owner-to-non-owner fetch round over the S2
    pattern.  Returns (per-rank dict dof -> gid, offsets)."""
    counts = [len(own.owned) for own in owns]
    offsets = fabric.exscan_sum(counts)
    gids = []
    for own, off in zip(owns, offsets):
        gids.append({g: off + i for i, g in enumerate(own.owned)})
    # owners send gids along the S1-receive lists (= S2 send side)
    boxes = {}
    for pat, gid in zip(patterns, gids):
        for q in pat.rcv_ranks:
            vals = [gid[g] for g in pat.rcv_dofs[q]]
            boxes[(pat.rank, q)] = [struct.pack(f"<{len(vals)}q", *vals)]
    inbox = fabric.neighbor_exchange(boxes)
    for pat, gid in zip(patterns, gids):
        for q in pat.snd_ranks:
            (blob,) = inbox[(pat.rank, q)]
            vals = struct.unpack(f"<{len(blob) // 8}q", blob)
            for g, val in zip(pat.snd_dofs[q], vals):
                gid[g] = val
    total = offsets[-1] + counts[-1] if counts else 0
    return gids, offsets + [total]
