"""Forest-of-trees mesh layer: brick connectivity, adaptation, 2:1 balance,
SFC partitioning, ghost layers and cell-neighbor queries.

The forest stores, per tree, the sorted sequence of leaf Morton keys plus a
global partition of the concatenated leaf sequence into P contiguous rank
slices.  All geometry is integer arithmetic on a global lattice in which
tree (i, j, k) occupies ``[i, i+1] x ...`` scaled by ``2**L_MAX``, so
inter-tree gluing is a pure translation and neighbor queries are exact.

Neighbor queries are computed from keys (one same-level region lookup per
cell face plus an exact contact filter), not stored.
"""

from __future__ import annotations

import itertools
import struct
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

from .boxes import Box, box_dim, box_intersect, box_contains, open_box_contains
from .morton import (L_MAX, MortonKey, child_index, children_of, is_ancestor,
                     parent_of, sfc_index, subtree_index_range)
from .polytope import PARENT_INTERIOR, RefTopology, enumerate_nfaces, refinement_rule

REFINE = "refine"
COARSEN = "coarsen"
KEEP = "keep"


class ViewGuardError(RuntimeError):
    """A rank asked about cells outside its local + ghost portion."""


class BrickConnectivity:
    """Coarse mesh of axis-aligned unit trees on a brick grid.

    ``active`` may omit grid positions to model non-convex domains (holes,
    L-shapes).  Tree ids are assigned in lexicographic order with the x index
    varying fastest; inter-tree transforms are pure translations.
    """

    def __init__(self, dims, active=None):
        self.dims = tuple(int(n) for n in dims)
        self.dim = len(self.dims)
        if self.dim not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        grid = list(itertools.product(*[range(n) for n in self.dims]))
        if active is None:
            active = grid
        self.active = frozenset(tuple(m) for m in active)
        if not self.active:
            raise ValueError("active tree set must be non-empty")
        ordered = sorted(self.active, key=lambda m: tuple(reversed(m)))
        self.tree_of_multi = {m: i for i, m in enumerate(ordered)}
        self.origins = tuple(ordered)

    @property
    def num_trees(self) -> int:
        return len(self.origins)

    def tree_at(self, multi) -> int | None:
        return self.tree_of_multi.get(tuple(multi))

    def tree_containing(self, gcoord) -> int | None:
        """Tree holding the cell whose global anchor is ``gcoord``."""
        multi = tuple(c >> L_MAX for c in gcoord)
        if any(not (0 <= m < n) for m, n in zip(multi, self.dims)):
            return None
        return self.tree_of_multi.get(multi)

    def neighbor(self, tree: int, offset) -> int | None:
        multi = tuple(m + o for m, o in zip(self.origins[tree], offset))
        return self.tree_at(multi)


@dataclass
class NeighborEntry:
    key: MortonKey
    matched_face: int


@dataclass
class NeighborSets:
    """Def. 2.5 classification of the cells across one local n-face."""
    conformal: list[NeighborEntry] = field(default_factory=list)
    higher: list[NeighborEntry] = field(default_factory=list)
    lower: list[NeighborEntry] = field(default_factory=list)

    def all_entries(self):
        return self.conformal + self.higher + self.lower


class Forest:
    """Linear forest: per-tree sorted leaves + rank partition offsets."""

    def __init__(self, conn: BrickConnectivity, leaves: dict[int, list[MortonKey]],
                 offsets, payload: dict[MortonKey, bytes] | None = None):
        self.conn = conn
        self.dim = conn.dim
        self.leaves = {t: list(ks) for t, ks in leaves.items()}
        self.offsets = tuple(int(o) for o in offsets)
        self.payload = dict(payload) if payload else {}
        self._indices = {t: [sfc_index(k) for k in ks] for t, ks in self.leaves.items()}
        starts, acc = [], 0
        for t in range(conn.num_trees):
            starts.append(acc)
            acc += len(self.leaves.get(t, ()))
        self._tree_start = starts
        self._num_leaves = acc
        self.topo: RefTopology = enumerate_nfaces(self.dim)
        self.rule = refinement_rule(self.dim)
        self._box_cache: dict[MortonKey, Box] = {}
        self._face_cache: dict[tuple[MortonKey, int], Box] = {}

    # -- bookkeeping ---------------------------------------------------------

    @property
    def ranks(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_leaves(self) -> int:
        return self._num_leaves

    def iter_leaves(self):
        for t in range(self.conn.num_trees):
            yield from self.leaves.get(t, ())

    def leaf_at(self, gidx: int) -> MortonKey:
        t = bisect_right(self._tree_start, gidx) - 1
        return self.leaves[t][gidx - self._tree_start[t]]

    def global_index(self, key: MortonKey) -> int:
        idxs = self._indices[key.tree]
        pos = bisect_left(idxs, sfc_index(key))
        if pos == len(idxs) or self.leaves[key.tree][pos] != key:
            raise KeyError(f"not a leaf: {key}")
        return self._tree_start[key.tree] + pos

    def is_leaf(self, key: MortonKey) -> bool:
        idxs = self._indices.get(key.tree)
        if idxs is None:
            return False
        pos = bisect_left(idxs, sfc_index(key))
        return pos < len(idxs) and self.leaves[key.tree][pos] == key

    def owner_rank(self, key: MortonKey) -> int:
        return bisect_right(self.offsets, self.global_index(key)) - 1

    def rank_slice(self, rank: int) -> list[MortonKey]:
        lo, hi = self.offsets[rank], self.offsets[rank + 1]
        return [self.leaf_at(i) for i in range(lo, hi)]

    # -- geometry ------------------------------------------------------------

    def cell_box(self, key: MortonKey) -> Box:
        box = self._box_cache.get(key)
        if box is None:
            origin = self.conn.origins[key.tree]
            size = key.size
            lo = tuple((o << L_MAX) + a for o, a in zip(origin, key.anchor))
            box = (lo, tuple(c + size for c in lo))
            self._box_cache[key] = box
        return box

    def face_box(self, key: MortonKey, fid: int) -> Box:
        box = self._face_cache.get((key, fid))
        if box is None:
            face = self.topo.nfaces[fid]
            clo, chi = self.cell_box(key)
            size = chi[0] - clo[0]
            lo = tuple(clo[ax] + (face.box[0][ax] >> 1) * size
                       for ax in range(self.dim))
            hi = tuple(clo[ax] + (face.box[1][ax] >> 1) * size
                       for ax in range(self.dim))
            box = (lo, hi)
            self._face_cache[(key, fid)] = box
        return box

    def carrier_face(self, key: MortonKey, box: Box) -> int | None:
        """Face of ``key`` whose open set carries the relative interior of
        ``box`` (a contact box on the cell boundary); None for the cell body."""
        clo, chi = self.cell_box(key)
        span, sides = [], []
        for ax in range(self.dim):
            if box[0][ax] < box[1][ax]:
                span.append(ax)
            elif box[0][ax] == clo[ax]:
                sides.append(0)
            elif box[0][ax] == chi[ax]:
                sides.append(1)
            else:
                return None
        if len(span) == self.dim:
            return None
        return self.topo.face_id(tuple(span), tuple(sides))

    # -- leaf lookup ---------------------------------------------------------

    def leaves_overlapping_cell(self, tree: int, level: int, anchor) -> list[MortonKey]:
        """Leaves with positive-volume overlap against the given cell region:
        the single covering ancestor, the equal leaf, or all descendants."""
        idxs = self._indices.get(tree)
        if not idxs:
            return []
        probe = MortonKey(tree, level, tuple(anchor))
        lo, hi = subtree_index_range(probe)
        pos = bisect_left(idxs, lo)
        if pos > 0 and is_ancestor(self.leaves[tree][pos - 1], probe):
            return [self.leaves[tree][pos - 1]]
        out = []
        while pos < len(idxs) and idxs[pos] < hi:
            out.append(self.leaves[tree][pos])
            pos += 1
        return out

    def validate(self):
        """Linear-octree invariant: sorted, disjoint, complete cover per tree."""
        full = 1 << (self.dim * L_MAX)
        for t in range(self.conn.num_trees):
            expect = 0
            for k in self.leaves.get(t, ()):
                lo, hi = subtree_index_range(k)
                if lo != expect:
                    raise AssertionError(f"tree {t}: gap/overlap at {k}")
                expect = hi
            if expect != full:
                raise AssertionError(f"tree {t}: incomplete cover")
        if list(self.offsets) != sorted(self.offsets) or \
                self.offsets[0] != 0 or self.offsets[-1] != self.num_leaves:
            raise AssertionError("bad partition offsets")


# -- neighbor queries (Def. 2.5) ----------------------------------------------


def neighbors_of(forest: Forest, key: MortonKey, fid: int,
                 restrict=None) -> NeighborSets:
    """Cells across the local n-face ``fid`` of ``key``, classified into
    conformal / higher-level / lower-level neighbors, each carrying the
    matched local n-face of the neighbor.

    ``restrict`` optionally filters results to a cell subset (used by rank
    views to model processor-local knowledge).
    """
    topo = forest.topo
    face = topo.nfaces[fid]
    fbox = forest.face_box(key, fid)
    clo, chi = forest.cell_box(key)
    size = key.size
    # same-level region across the face: shift by the face direction
    side_it = iter(face.sides)
    glo = []
    for ax in range(forest.dim):
        if ax in face.span:
            glo.append(clo[ax])
        else:
            glo.append(clo[ax] + (2 * next(side_it) - 1) * size)
    tree = forest.conn.tree_containing(glo)
    sets = NeighborSets()
    if tree is None:
        return sets
    origin = forest.conn.origins[tree]
    anchor = tuple(g - (o << L_MAX) for g, o in zip(glo, origin))
    kbox = (clo, chi)
    for cand in forest.leaves_overlapping_cell(tree, key.level, anchor):
        if restrict is not None and cand not in restrict:
            continue
        contact = box_intersect(kbox, forest.cell_box(cand))
        if contact is None or not box_contains(fbox, contact):
            continue
        if forest.carrier_face(key, contact) != fid:
            continue
        mfid = forest.carrier_face(cand, contact)
        if mfid is None:
            continue
        mbox = forest.face_box(cand, mfid)
        entry = NeighborEntry(cand, mfid)
        if mbox == fbox:
            sets.conformal.append(entry)
        elif open_box_contains(fbox, mbox):
            sets.higher.append(entry)
        elif open_box_contains(mbox, fbox):
            sets.lower.append(entry)
    return sets


def contact_neighbors(forest: Forest, key: MortonKey, min_dim: int):
    """All leaves touching ``key`` across a contact of dimension >= min_dim."""
    clo, chi = forest.cell_box(key)
    size = key.size
    found: dict[MortonKey, int] = {}
    for dvec in itertools.product((-1, 0, 1), repeat=forest.dim):
        nz = sum(1 for c in dvec if c)
        if nz == 0 or forest.dim - nz < min_dim:
            continue
        glo = tuple(c + d * size for c, d in zip(clo, dvec))
        tree = forest.conn.tree_containing(glo)
        if tree is None:
            continue
        origin = forest.conn.origins[tree]
        anchor = tuple(g - (o << L_MAX) for g, o in zip(glo, origin))
        for cand in forest.leaves_overlapping_cell(tree, key.level, anchor):
            if cand == key or cand in found:
                continue
            contact = box_intersect((clo, chi), forest.cell_box(cand))
            if contact is not None and box_dim(contact) >= min_dim:
                found[cand] = box_dim(contact)
    return found


# -- handler operations --------------------------------------------------------


def _equal_cuts(n: int, ranks: int):
    return tuple((p * n + ranks - 1) // ranks if p else 0 for p in range(ranks)) + (n,)


def new_forest(conn: BrickConnectivity, uniform_level: int, ranks: int) -> Forest:
    """Create a uniformly refined forest with equal SFC partition cuts."""
    if uniform_level > L_MAX:
        raise ValueError(f"level {uniform_level} exceeds L_MAX={L_MAX}")
    size = 1 << (L_MAX - uniform_level)
    leaves = {}
    for t in range(conn.num_trees):
        keys = [MortonKey(t, uniform_level, a) for a in itertools.product(
            range(0, 1 << L_MAX, size), repeat=conn.dim)]
        keys.sort(key=sfc_index)
        leaves[t] = keys
    total = conn.num_trees * (1 << (conn.dim * uniform_level))
    return Forest(conn, leaves, _equal_cuts(total, ranks))


def adapt(forest: Forest, flags: dict[MortonKey, str],
          refine_transfer=None, coarsen_transfer=None) -> Forest:
    """Refine/coarsen leaves.  A sibling family collapses only when all its
    members are flagged COARSEN; payload transfer hooks run per replacement."""
    for k in flags:
        if not forest.is_leaf(k):
            raise ValueError(f"flag on non-leaf key: {k}")
    nchild = 1 << forest.dim
    payload = dict(forest.payload)
    new_leaves: dict[int, list[MortonKey]] = {}
    old_rank = [forest.owner_rank(k) if forest.ranks > 1 else 0
                for k in forest.iter_leaves()]
    new_rank: list[int] = []
    gidx = 0
    for t in range(forest.conn.num_trees):
        out: list[MortonKey] = []
        ks = forest.leaves.get(t, [])
        i = 0
        while i < len(ks):
            k = ks[i]
            flag = flags.get(k, KEEP)
            if flag == COARSEN and k.level > 0 and child_index(k) == 0 and \
                    i + nchild <= len(ks):
                fam = ks[i:i + nchild]
                parent = parent_of(k)
                if all(flags.get(c, KEEP) == COARSEN and c.level == k.level and
                       is_ancestor(parent, c) for c in fam):
                    out.append(parent)
                    if any(c in payload for c in fam):
                        vals = [payload.pop(c, None) for c in fam]
                        payload[parent] = (coarsen_transfer(fam, vals)
                                           if coarsen_transfer else
                                           next(v for v in vals if v is not None))
                    new_rank.append(old_rank[gidx])
                    gidx += nchild
                    i += nchild
                    continue
            if flag == REFINE:
                kids = children_of(k)
                out.extend(kids)
                if k in payload:
                    val = payload.pop(k)
                    if refine_transfer:
                        kid_vals = refine_transfer(k, val, kids)
                        for c, v in zip(kids, kid_vals):
                            payload[c] = v
                    else:
                        for c in kids:
                            payload[c] = val
                new_rank.extend([old_rank[gidx]] * nchild)
            else:
                out.append(k)
                new_rank.append(old_rank[gidx])
            gidx += 1
            i += 1
        new_leaves[t] = out
    counts = [0] * forest.ranks
    for r in new_rank:
        counts[r] += 1
    offsets = [0]
    for c in counts:
        offsets.append(offsets[-1] + c)
    return Forest(forest.conn, new_leaves, offsets, payload)


def balance(forest: Forest, k: int) -> Forest:
    """Refine until the 2:1 k-balance of Def. 2.8 holds.

    Fixpoint ripple: every sweep refines each leaf that has a neighbor more
    than one level finer across a contact of dimension >= k.  Levels are
    bounded, so the sweep terminates; refinement is never undone.
    """
    if not 0 <= k < forest.dim:
        raise ValueError(f"k must be in [0, {forest.dim})")
    cur = forest
    while True:
        marked = {}
        for key in cur.iter_leaves():
            for other, cdim in contact_neighbors(cur, key, k).items():
                if other.level > key.level + 1:
                    marked[key] = REFINE
                    break
        if not marked:
            return cur
        cur = adapt(cur, marked)


def partition(forest: Forest, weights: dict[MortonKey, float] | None = None) -> Forest:
    """Greedy contiguous SFC cuts; each rank lands within one maximum cell
    weight of the ideal share."""
    n, ranks = forest.num_leaves, forest.ranks
    if weights is None:
        offsets = _equal_cuts(n, ranks)
    else:
        w = [float(weights[k]) for k in forest.iter_leaves()]
        total = sum(w)
        if total <= 0:
            raise ValueError("weights must have positive total")
        prefix = [0.0]
        for x in w:
            prefix.append(prefix[-1] + x)
        offsets = [0]
        for p in range(1, ranks):
            target = p * total / ranks
            i = offsets[-1]
            while i < n and prefix[i] < target:
                i += 1
            offsets.append(i)
        offsets.append(n)
    return Forest(forest.conn, forest.leaves, offsets, forest.payload)


class RankView:
    """Access-guarded per-rank portion T^p = T_L^p + T_G^p.

    Neighbor queries are answered only for cells in the view and their
    results are restricted to the view.  For ghost cells the answer comes
    from the ghost-completion exchange (see femesh); until that table is
    filled, ghost queries are refused.
    """

    def __init__(self, rank, forest, local_keys, ghost_owner, mirror_targets):
        self.rank = rank
        self.forest = forest
        self.local_keys = list(local_keys)
        self.ghost_owner = dict(ghost_owner)
        self.mirror_targets = mirror_targets
        self.local_set = set(local_keys)
        self.cell_set = self.local_set | set(ghost_owner)
        self._ghost_tables: dict[MortonKey, dict[int, NeighborSets]] = {}

    @property
    def ghost_keys(self):
        return sorted(self.ghost_owner, key=lambda k: (k.tree, sfc_index(k)))

    def cells(self):
        return sorted(self.cell_set, key=lambda k: (k.tree, sfc_index(k)))

    def is_local(self, key) -> bool:
        return key in self.local_set

    def require_in_view(self, key):
        if key not in self.cell_set:
            raise ViewGuardError(
                f"rank {self.rank}: cell {key} outside T_L^p + T_G^p")

    @property
    def ghost_complete(self) -> bool:
        return len(self._ghost_tables) == len(self.ghost_owner)

    def install_ghost_neighbors(self, key, table: dict[int, NeighborSets]):
        restricted = {}
        for fid, sets in table.items():
            restricted[fid] = NeighborSets(
                [e for e in sets.conformal if e.key in self.cell_set],
                [e for e in sets.higher if e.key in self.cell_set],
                [e for e in sets.lower if e.key in self.cell_set])
        self._ghost_tables[key] = restricted

    def neighbors(self, key: MortonKey, fid: int) -> NeighborSets:
        self.require_in_view(key)
        if key in self.local_set:
            return neighbors_of(self.forest, key, fid, restrict=self.cell_set)
        table = self._ghost_tables.get(key)
        if table is None:
            raise ViewGuardError(
                f"rank {self.rank}: ghost {key} queried before completion round")
        return table[fid]

    def complete_cells_around(self, box: Box):
        """Certify that every global cell touching ``box`` is in the view.

        This is the locality witness: it raises ViewGuardError exactly when a
        computation would need off-view cells to be correct.
        """
        for key in self.forest.iter_leaves():
            if box_intersect(self.forest.cell_box(key), box) is not None:
                if key not in self.cell_set:
                    raise ViewGuardError(
                        f"rank {self.rank}: cell {key} around {box} outside view")


def ghost(forest: Forest, s: int) -> list[RankView]:
    """Per-rank views with the s-ghost layer of Def. 3.8: off-rank leaves
    neighboring local leaves across n-faces with n >= s."""
    if not 0 <= s < forest.dim:
        raise ValueError(f"s must be in [0, {forest.dim})")
    ranks = forest.ranks
    locals_per_rank = [forest.rank_slice(p) for p in range(ranks)]
    ghosts: list[dict[MortonKey, int]] = [dict() for _ in range(ranks)]
    mirrors: list[dict[MortonKey, list[int]]] = [dict() for _ in range(ranks)]
    for p in range(ranks):
        local_set = set(locals_per_rank[p])
        seen: dict[MortonKey, int] = {}
        for key in locals_per_rank[p]:
            for other in contact_neighbors(forest, key, s):
                if other not in local_set and other not in seen:
                    seen[other] = forest.owner_rank(other)
        ghosts[p] = dict(sorted(seen.items(),
                                key=lambda kv: (kv[0].tree, sfc_index(kv[0]))))
        for gk, owner in ghosts[p].items():
            mirrors[owner].setdefault(gk, []).append(p)
    views = []
    for p in range(ranks):
        targets = {k: sorted(v) for k, v in sorted(
            mirrors[p].items(), key=lambda kv: (kv[0].tree, sfc_index(kv[0])))}
        views.append(RankView(p, forest, locals_per_rank[p], ghosts[p], targets))
    return views


# -- serialization --------------------------------------------------------------

_MAGIC = b"FFE1"


def forest_to_bytes(forest: Forest) -> bytes:
    conn = forest.conn
    out = bytearray()
    out += struct.pack("<4sBBI", _MAGIC, forest.dim, L_MAX, forest.ranks)
    out += struct.pack(f"<{forest.dim}I", *conn.dims)
    grid = sorted(itertools.product(*[range(n) for n in conn.dims]),
                  key=lambda m: tuple(reversed(m)))
    bits = bytearray((len(grid) + 7) // 8)
    for i, m in enumerate(grid):
        if m in conn.active:
            bits[i // 8] |= 1 << (i % 8)
    out += bytes(bits)
    out += struct.pack("<I", conn.num_trees)
    for t in range(conn.num_trees):
        ks = forest.leaves.get(t, [])
        out += struct.pack("<I", len(ks))
        for k in ks:
            out += struct.pack(f"<IB{forest.dim}I", k.tree, k.level, *k.anchor)
    out += struct.pack(f"<{len(forest.offsets)}Q", *forest.offsets)
    items = sorted(forest.payload.items(),
                   key=lambda kv: (kv[0].tree, sfc_index(kv[0])))
    out += struct.pack("<I", len(items))
    for k, blob in items:
        out += struct.pack(f"<IB{forest.dim}I", k.tree, k.level, *k.anchor)
        out += struct.pack("<I", len(blob)) + blob
    return bytes(out)


def forest_from_bytes(data: bytes) -> Forest:
    off = 0

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    magic, dim, lmax, ranks = take("<4sBBI")
    if magic != _MAGIC:
        raise ValueError("bad magic")
    if lmax != L_MAX:
        raise ValueError(f"unsupported L_MAX {lmax}")
    dims = take(f"<{dim}I")
    grid = sorted(itertools.product(*[range(n) for n in dims]),
                  key=lambda m: tuple(reversed(m)))
    nbytes = (len(grid) + 7) // 8
    bits = data[off:off + nbytes]
    off += nbytes
    active = [m for i, m in enumerate(grid) if bits[i // 8] >> (i % 8) & 1]
    conn = BrickConnectivity(dims, active)
    (ntrees,) = take("<I")
    leaves = {}
    for t in range(ntrees):
        (count,) = take("<I")
        ks = []
        for _ in range(count):
            vals = take(f"<IB{dim}I")
            ks.append(MortonKey(vals[0], vals[1], tuple(vals[2:])))
        leaves[t] = ks
    offsets = take(f"<{ranks + 1}Q")
    (npay,) = take("<I")
    payload = {}
    for _ in range(npay):
        vals = take(f"<IB{dim}I")
        key = MortonKey(vals[0], vals[1], tuple(vals[2:]))
        (ln,) = take("<I")
        payload[key] = data[off:off + ln]
        off += ln
    return Forest(conn, leaves, offsets, payload)
