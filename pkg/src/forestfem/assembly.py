"""Poisson bilinear form integration, constraint application through the
transformation approach (cell matrices congruence-transformed to free DOFs
during assembly), subassembled and fully-assembled sparse systems, and a
conjugate-gradient solver whose distributed matvec exercises the S1/S2
interface exchange.

Cells are axis-aligned cubes (trees are unit cubes), so geometry maps are
diagonal scalings and tensor-product Gauss quadrature with degree+1 points
per direction integrates the stiffness exactly.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .dofdist import assemble_interface
from .fespace import ConstraintSet, DofMap, FEDescriptor
from .femesh import FEMesh
from .morton import L_MAX
from .simfabric import Fabric, decode, encode


class AssemblyError(RuntimeError):
    pass


def gauss_rule(npts: int):
    """Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def reference_element(dim: int, degree: int):
    """Per-axis stiffness factor matrices and basis values at quadrature
    points for the unit reference cell."""
    fe = FEDescriptor(dim, degree)
    pts, wts = gauss_rule(degree + 1)
    n = fe.num_nodes
    qp = []
    for flat in range(len(pts) ** dim):
        idx = [(flat // len(pts) ** ax) % len(pts) for ax in range(dim)]
        qp.append((tuple(pts[i] for i in idx),
                   float(np.prod([wts[i] for i in idx]))))
    vals = np.empty((len(qp), n))
    grads = np.empty((len(qp), n, dim))
    for q, (xi, _) in enumerate(qp):
        for i in range(n):
            t = fe.node_tuple(i)
            vals[q, i] = fe.shape_value(t, xi)
            grads[q, i] = fe.shape_grad(t, xi)
    weights = np.array([w for _, w in qp])
    points = np.array([xi for xi, _ in qp])
    stiff = np.zeros((n, n))
    for ax in range(dim):
        ga = grads[:, :, ax]
        stiff += (ga[:, :, None] * ga[:, None, :] * weights[:, None, None]).sum(axis=0)
    return points, weights, vals, stiff


def integrate_cell(lo_phys, h: float, fe: FEDescriptor, f_rhs):
    """Stiffness matrix and load vector of one axis-aligned cube cell.

    Stiffness scales as h^(d-2); the load uses the same quadrature rule.
    """
    points, weights, vals, stiff = reference_element(fe.dim, fe.degree)
    mat = (h ** (fe.dim - 2)) * stiff
    phys = lo_phys[None, :] + h * points
    fvals = np.array([f_rhs(p) for p in phys])
    rhs = (h ** fe.dim) * (vals * (weights * fvals)[:, None]).sum(axis=0)
    return mat, rhs


def cell_geometry(forest, key):
    lo, hi = forest.cell_box(key)
    scale = float(1 << L_MAX)
    return np.array([c / scale for c in lo]), (hi[0] - lo[0]) / scale


def dirichlet_dofs(mesh: FEMesh, dofs: DofMap) -> set[int]:
    """DOFs on the geometric boundary of the (full-brick) domain."""
    conn = mesh.view.forest.conn
    hi = [n << L_MAX for n in conn.dims]
    out = set()
    for g in range(dofs.num_dofs):
        pt = dofs.dof_point[g]
        if any(c == 0 or c == h for c, h in zip(pt, hi)):
            out.add(g)
    return out


@dataclass
class SubassembledSystem:
    """Per-rank partial sums over proc-local DOF indices.  Hanging and
    Dirichlet rows/columns are eliminated (zero)."""
    rank: int
    dofs: DofMap
    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray            # per proc-local dof: takes part in the solve
    dirichlet: set


def assemble_subassembled(mesh: FEMesh, fe: FEDescriptor, dofs: DofMap,
                          constraints: ConstraintSet, f_rhs,
                          dirichlet: set | None = None) -> SubassembledSystem:
    """Loop local cells, apply C^T A_K C cell-wise (C expands free DOFs to
    cell DOFs through the hanging constraints), eliminate Dirichlet DOFs
    symmetrically with a zero lift."""
    forest = mesh.view.forest
    if dirichlet is None:
        dirichlet = dirichlet_dofs(mesh, dofs)
    n = dofs.num_dofs
    expand: dict[int, list[tuple[int, float]]] = {}

    def expansion(g):
        exp = expand.get(g)
        if exp is None:
            if g in dirichlet:
                exp = []
            elif g in constraints:
                exp = []
                for m, c in constraints[g]:
                    if dofs.hanging[m]:
                        raise AssemblyError(f"non-direct constraint at DOF {g}")
                    if m not in dirichlet:
                        exp.append((m, c))
            elif dofs.hanging[g]:
                raise AssemblyError(f"hanging DOF {g} without constraint")
            else:
                exp = [(g, 1.0)]
            expand[g] = exp
        return exp

    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for key in mesh.view.local_keys:
        lo, h = cell_geometry(forest, key)
        mat, load = integrate_cell(lo, h, fe, f_rhs)
        ids = dofs.cell_dofs[key]
        exps = [expansion(g) for g in ids]
        for i, ei in enumerate(exps):
            for a, ca in ei:
                rhs[a] += ca * load[i]
                for j, ej in enumerate(exps):
                    mij = mat[i, j]
                    if mij == 0.0:
                        continue
                    for b, cb in ej:
                        rows.append(a)
                        cols.append(b)
                        vals.append(ca * mij * cb)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    matrix.sum_duplicates()
    free = np.zeros(n, dtype=bool)
    for g in range(n):
        free[g] = (not dofs.hanging[g]) and g not in dirichlet
    return SubassembledSystem(mesh.rank, dofs, matrix, rhs, free, dirichlet)


@dataclass
class FullyAssembledSystem:
    """Row-partitioned global matrix: this rank owns the consecutive global
    rows [row_start, row_start + num_rows)."""
    rank: int
    row_start: int
    num_rows: int
    offsets: list[int]
    matrix: sp.csr_matrix       # owned rows x global cols
    rhs: np.ndarray             # owned rows


def _row_owner(offsets, row):
    return bisect_right(offsets, row) - 1


def assemble_fully(systems: list[SubassembledSystem], gids: list[dict],
                   offsets: list[int], fabric: Fabric) -> list[FullyAssembledSystem]:
    """Three substeps: (A) one exchange completes the sparsity pattern of
    owned rows, (B) owned-row storage is allocated from it, (C) values are
    injected row-by-row and one exchange transfers remotely computed partial
    values to their owner rows, reduce-summing on arrival."""
    ranks = len(systems)
    total = offsets[-1]
    # per rank: entries in global ids, split mine/remote
    locals_ = []
    remote_entries: dict[tuple[int, int], list] = {}
    remote_rhs: dict[tuple[int, int], list] = {}
    for p, sys_p in enumerate(systems):
        gid = gids[p]
        coo = sys_p.matrix.tocoo()
        mine = []
        for a, b, v in zip(coo.row, coo.col, coo.data):
            if not (sys_p.free[a] and sys_p.free[b]):
                continue
            ga, gb = gid[a], gid[b]
            q = _row_owner(offsets, ga)
            if q == p:
                mine.append((ga, gb, v))
            else:
                remote_entries.setdefault((p, q), []).append((ga, gb, v))
        rvals = []
        for a in np.nonzero(sys_p.free)[0]:
            if int(a) not in gid:
                continue  # free ghost DOF untouched by local cells
            va = sys_p.rhs[a]
            ga = gid[int(a)]
            q = _row_owner(offsets, ga)
            if q == p:
                rvals.append((ga, va))
            else:
                remote_rhs.setdefault((p, q), []).append((ga, va))
        locals_.append((mine, rvals))
    # (A): ship the off-owner sparsity pattern
    boxes = {}
    for (p, q), entries in sorted(remote_entries.items()):
        boxes[(p, q)] = [encode(sorted({(a, b) for a, b, _ in entries}))]
    pattern_in = fabric.neighbor_exchange(boxes)
    patterns: list[dict[int, set]] = [dict() for _ in range(ranks)]
    for p, (mine, _) in enumerate(locals_):
        rowsets = patterns[p]
        for a, b, _ in mine:
            rowsets.setdefault(a, set()).add(b)
    for (dst, src), msgs in sorted(pattern_in.items()):
        for m in msgs:
            for a, b in decode(m):
                patterns[dst].setdefault(a, set()).add(b)
    # (C): ship the values, reduce-sum at owners
    boxes = {}
    for (p, q), entries in sorted(remote_entries.items()):
        boxes[(p, q)] = [encode((entries, remote_rhs.get((p, q), [])))]
    for (p, q), entries in sorted(remote_rhs.items()):
        if (p, q) not in boxes:
            boxes[(p, q)] = [encode(([], entries))]
    values_in = fabric.neighbor_exchange(boxes)
    out = []
    for p, sys_p in enumerate(systems):
        start = offsets[p]
        nrows = offsets[p + 1] - offsets[p]
        # (B): allocate storage from the completed pattern
        indptr = [0]
        indices = []
        for r in range(start, start + nrows):
            cols = sorted(patterns[p].get(r, ()))
            indices.extend(cols)
            indptr.append(len(indices))
        data = np.zeros(len(indices))
        mat = sp.csr_matrix((data, indices, indptr), shape=(nrows, total))
        rhs = np.zeros(nrows)

        def inject(a, b, v):
            lo, hi = mat.indptr[a - start], mat.indptr[a - start + 1]
            pos = np.searchsorted(mat.indices[lo:hi], b)
            if pos >= hi - lo or mat.indices[lo + pos] != b:
                raise AssemblyError(f"injection outside pattern: ({a},{b})")
            mat.data[lo + pos] += v

        mine, rvals = locals_[p]
        for a, b, v in mine:
            inject(a, b, v)
        for a, v in rvals:
            rhs[a - start] += v
        for (dst, src), msgs in sorted(values_in.items()):
            if dst != p:
                continue
            for m in msgs:
                entries, rhs_entries = decode(m)
                for a, b, v in entries:
                    inject(a, b, v)
                for a, v in rhs_entries:
                    rhs[a - start] += v
        out.append(FullyAssembledSystem(p, start, nrows, list(offsets), mat, rhs))
    return out


# -- distributed CG ---------------------------------------------------------------


def _counted_mask(sys_p: SubassembledSystem, own) -> np.ndarray:
    """Each global DOF is counted on exactly one rank for dot products."""
    dofs = sys_p.dofs
    mask = np.zeros(dofs.num_dofs, dtype=bool)
    for g in range(dofs.num_dofs):
        if not (sys_p.free[g] and dofs.local[g]):
            continue
        if dofs.interface[g] and own.owner.get(g) != sys_p.rank:
            continue
        mask[g] = True
    return mask


def cg_solve_subassembled(systems, patterns, owns, fabric: Fabric,
                          tol: float = 1e-12, maxit: int = 5000):
    """CG with subassembled matvec: local sparse multiply followed by the
    S1/S2 interface assembly; dot products via deterministic rank-ascending
    sum reduction."""
    masks = [_counted_mask(s, o) for s, o in zip(systems, owns)]

    def ddot(us, vs):
        parts = [float(np.dot(u[m], v[m])) for u, v, m in zip(us, vs, masks)]
        return fabric.allreduce(parts, "sum")[0]

    def matvec(xs):
        ys = [s.matrix.dot(x) for s, x in zip(systems, xs)]
        for y, s in zip(ys, systems):
            y[~s.free] = 0.0
        return assemble_interface(patterns, ys, fabric)

    bs = assemble_interface(patterns, [s.rhs for s in systems], fabric)
    for b, s in zip(bs, systems):
        b[~s.free] = 0.0
    xs = [np.zeros_like(b) for b in bs]
    rs = [b.copy() for b in bs]
    ps = [r.copy() for r in rs]
    rz = ddot(rs, rs)
    bnorm = np.sqrt(ddot(bs, bs))
    if bnorm == 0.0:
        return xs, 0
    for it in range(1, maxit + 1):
        qs = matvec(ps)
        pq = ddot(ps, qs)
        if pq <= 0.0:
            raise AssemblyError("matrix not SPD on the constrained space")
        alpha = rz / pq
        for x, p_, r, q in zip(xs, ps, rs, qs):
            x += alpha * p_
            r -= alpha * q
        rz_new = ddot(rs, rs)
        if np.sqrt(rz_new) <= tol * bnorm:
            return xs, it
        beta = rz_new / rz
        rz = rz_new
        for p_, r in zip(ps, rs):
            p_ *= beta
            p_ += r
    raise AssemblyError(f"CG did not converge in {maxit} iterations")


def _column_fetch_plan(fulls: list[FullyAssembledSystem], fabric: Fabric):
    """One setup round: tell each owner which columns this rank needs."""
    requests = [dict() for _ in fulls]
    for p, f in enumerate(fulls):
        need = sorted(set(int(c) for c in f.matrix.indices)
                      - set(range(f.row_start, f.row_start + f.num_rows)))
        for c in need:
            q = _row_owner(f.offsets, c)
            requests[p].setdefault(q, []).append(c)
    boxes = {}
    for p, reqs in enumerate(requests):
        for q, cols in sorted(reqs.items()):
            boxes[(p, q)] = [encode(cols)]
    inbox = fabric.neighbor_exchange(boxes)
    serve: list[dict[int, list[int]]] = [dict() for _ in fulls]
    for (dst, src), msgs in sorted(inbox.items()):
        for m in msgs:
            serve[dst][src] = decode(m)
    return requests, serve


def cg_solve_fully(fulls: list[FullyAssembledSystem], fabric: Fabric,
                   tol: float = 1e-12, maxit: int = 5000):
    """CG on the row-partitioned system; each matvec gathers off-owner
    column values from their owners in one exchange round."""
    requests, serve = _column_fetch_plan(fulls, fabric)
    total = fulls[0].offsets[-1]

    def gather(xs):
        boxes = {}
        for p, f in enumerate(fulls):
            for q, cols in sorted(serve[p].items()):
                vals = [xs[p][c - f.row_start] for c in cols]
                boxes[(p, q)] = [struct.pack(f"<{len(vals)}d", *vals)]
        inbox = fabric.neighbor_exchange(boxes)
        full_x = []
        for p, f in enumerate(fulls):
            xg = np.zeros(total)
            xg[f.row_start:f.row_start + f.num_rows] = xs[p]
            for q, cols in sorted(requests[p].items()):
                (blob,) = inbox[(p, q)]
                vals = struct.unpack(f"<{len(blob) // 8}d", blob)
                xg[np.asarray(cols, dtype=int)] = vals
            full_x.append(xg)
        return full_x

    def matvec(xs):
        fx = gather(xs)
        return [f.matrix.dot(x) for f, x in zip(fulls, fx)]

    def ddot(us, vs):
        parts = [float(np.dot(u, v)) for u, v in zip(us, vs)]
        return fabric.allreduce(parts, "sum")[0]

    bs = [f.rhs.copy() for f in fulls]
    xs = [np.zeros_like(b) for b in bs]
    rs = [b.copy() for b in bs]
    ps = [r.copy() for r in rs]
    rz = ddot(rs, rs)
    bnorm = np.sqrt(ddot(bs, bs))
    if bnorm == 0.0:
        return xs, 0
    for it in range(1, maxit + 1):
        qs = matvec(ps)
        pq = ddot(ps, qs)
        if pq <= 0.0:
            raise AssemblyError("matrix not SPD on the constrained space")
        alpha = rz / pq
        for x, p_, r, q in zip(xs, ps, rs, qs):
            x += alpha * p_
            r -= alpha * q
        rz_new = ddot(rs, rs)
        if np.sqrt(rz_new) <= tol * bnorm:
            return xs, it
        beta = rz_new / rz
        rz = rz_new
        for p_, r in zip(ps, rs):
            p_ *= beta
            p_ += r
    raise AssemblyError(f"CG did not converge in {maxit} iterations")


def collate_global(systems, gids, offsets):
    """Rank-sum of subassembled matrices mapped through global ids (serial
    diffing aid)."""
    total = offsets[-1]
    rows, cols, vals = [], [], []
    rhs = np.zeros(total)
    for sys_p, gid in zip(systems, gids):
        coo = sys_p.matrix.tocoo()
        for a, b, v in zip(coo.row, coo.col, coo.data):
            if sys_p.free[a] and sys_p.free[b]:
                rows.append(gid[a])
                cols.append(gid[b])
                vals.append(v)
        for a in np.nonzero(sys_p.free)[0]:
            if int(a) in gid:
                rhs[gid[int(a)]] += sys_p.rhs[a]
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(total, total))
    mat.sum_duplicates()
    return mat, rhs


def write_matrix_market(path, systems, gids, offsets):
    """Dump the rank-summed global matrix in MatrixMarket coordinate format."""
    from scipy.io import mmwrite
    mat, _ = collate_global(systems, gids, offsets)
    mmwrite(path, mat.tocoo())
