"""AMR pipeline driver and CLI.

Per step: rebuild the outer mesh and FE space, assemble the linear system in
both distributed layouts, solve with CG, estimate cell errors with the
face-jump indicator, mark cells by global threshold fractions, then
refine/coarsen + rebalance and redistribute.  Per-stage wall times (max over
simulated ranks), cell/DOF bookkeeping and fabric traffic are emitted as one
JSON object per step.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import (assemble_fully, assemble_subassembled, cell_geometry,
                       cg_solve_subassembled, dirichlet_dofs, gauss_rule)
from .dofdist import build_comm_pattern, compute_ownership, global_numbering
from .femesh import build_femesh, complete_ghost_neighbors
from .fespace import build_constraints, enumerate_dofs, make_lagrangian
from .forest import (COARSEN, KEEP, REFINE, BrickConnectivity, Forest, adapt,
                     balance, ghost, new_forest, partition)
from .morton import L_MAX
from .simfabric import Fabric, exchange_cell_payloads
from .vtkout import write_vtk

STAGES = ("MESH", "FE_SPACE_SUB_ASSEMBLY", "FE_SPACE_FULL_ASSEMBLY",
          "ASSEMBLY_SUB_ASSEMBLY", "ASSEMBLY_FULL_ASSEMBLY",
          "ERROR_ESTIMATOR", "SOLVE", "TOTAL_SUB_ASSEMBLY",
          "TOTAL_FULL_ASSEMBLY")

STATS_SCHEMA = {
    "type": "object",
    "required": ["step", "stages", "cells", "dofs", "fabric", "solve_iters",
                 "marked"],
    "properties": {
        "step": {"type": "integer", "minimum": 0},
        "stages": {
            "type": "object",
            "required": list(STAGES),
            "properties": {s: {"type": "number", "minimum": 0} for s in STAGES},
        },
        "cells": {
            "type": "object",
            "required": ["total", "min_per_rank", "max_per_rank"],
            "properties": {k: {"type": "integer", "minimum": 0}
                           for k in ("total", "min_per_rank", "max_per_rank")},
        },
        "dofs": {
            "type": "object",
            "required": ["total", "regular", "hanging"],
            "properties": {k: {"type": "integer", "minimum": 0}
                           for k in ("total", "regular", "hanging")},
        },
        "fabric": {"type": "object"},
        "solve_iters": {"type": "integer", "minimum": 0},
        "marked": {
            "type": "object",
            "required": ["refine", "coarsen"],
        },
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class AmrConfig:
    dim: int = 2
    degree: int = 1
    ranks: int = 4
    k_balance: int = 1
    s_ghost: int | None = None
    steps: int = 6
    refine_fraction: float = 0.15
    coarsen_fraction: float = 0.03
    problem: str = "sinusoid"
    seed: int = 0
    initial_level: int | None = None
    allow_unsafe_k: bool = False
    cg_tol: float = 1e-12
    stats_path: str | None = None
    vtk_prefix: str | None = None
    comm_log_path: str | None = None

    def validate(self):
        if self.dim not in (2, 3):
            raise ConfigError("dim must be 2 or 3")
        if self.degree not in (1, 2):
            raise ConfigError("degree must be 1 or 2")
        if not 0 <= self.k_balance < self.dim:
            raise ConfigError("k out of range")
        if self.refine_fraction + self.coarsen_fraction > 1.0 + 1e-12:
            raise ConfigError("refine and coarsen fractions must sum to <= 1")
        fe_lowest = 0  # Lagrangian spaces own vertex DOFs
        if not self.allow_unsafe_k and self.k_balance > max(1, fe_lowest):
            raise ConfigError(
                f"k={self.k_balance} exceeds max(1, D)={max(1, fe_lowest)}: "
                f"hanging constraints would not be locally resolvable "
                f"(pass --allow-unsafe-k to run the counterexample)")
        s = self.effective_s()
        if not self.allow_unsafe_k and s > fe_lowest:
            raise ConfigError(
                f"s={s} exceeds D={fe_lowest}: ownership would not be "
                f"locally computable (pass --allow-unsafe-k to override)")
        return self

    def effective_s(self) -> int:
        if self.s_ghost is not None:
            return self.s_ghost
        return min(self.k_balance, 0)  # D(V_h) = 0 for Lagrangian FEs

    def mesh_filter_k(self) -> int:
        return min(self.k_balance, 1)

    def start_level(self) -> int:
        if self.initial_level is not None:
            return self.initial_level
        return 4 if self.dim == 2 else 2


def sinusoid_rhs(dim):
    if dim == 2:
        def f(p):
            return 1.0 if p[1] > 0.5 + 0.25 * math.sin(4 * math.pi * p[0]) \
                else -1.0
    else:
        def f(p):
            s = 0.5 + 0.25 * math.sin(4 * math.pi * p[0]) * \
                math.sin(4 * math.pi * p[1])
            return 1.0 if p[2] > s else -1.0
    return f


def sinusoid_interface_distance(p):
    """Vertical distance from a point to the sinusoidal interface."""
    if len(p) == 2:
        return abs(p[1] - (0.5 + 0.25 * math.sin(4 * math.pi * p[0])))
    return abs(p[2] - (0.5 + 0.25 * math.sin(4 * math.pi * p[0]) *
                       math.sin(4 * math.pi * p[1])))


def manufactured_solution(dim):
    def u(p):
        out = 1.0
        for c in p:
            out *= math.sin(math.pi * c)
        return out

    def f(p):
        return dim * math.pi ** 2 * u(p)

    return u, f


def make_problem(config: AmrConfig):
    if config.problem == "sinusoid":
        return sinusoid_rhs(config.dim), None
    if config.problem == "manufactured":
        u, f = manufactured_solution(config.dim)
        return f, u
    raise ConfigError(f"unknown problem {config.problem}")


# -- error estimation ---------------------------------------------------------------


def recover_nodal_values(mesh, dofs, constraints, x):
    """Per-cell nodal value arrays with hanging DOFs recovered from their
    constraints (local cells only)."""
    vals = np.array(x, dtype=float, copy=True)
    for g, entries in constraints.items():
        vals[g] = sum(vals[m] * c for m, c in entries)
    out = {}
    for key in mesh.view.local_keys:
        out[key] = vals[np.asarray(dofs.cell_dofs[key], dtype=int)]
    return out


def exchange_ghost_values(meshes, per_rank_values, fabric):
    """Ship per-cell nodal values to ranks holding the cell as ghost."""
    received = exchange_cell_payloads(
        fabric, [m.view for m in meshes],
        [{k: v.tolist() for k, v in vals.items()} for vals in per_rank_values])
    merged = []
    for vals, extra in zip(per_rank_values, received):
        full = dict(vals)
        for key, lst in extra.items():
            full[key] = np.asarray(lst)
        merged.append(full)
    return merged


def _grad_at(fe, lo, h, nodal, point):
    xi = [(point[ax] - lo[ax]) / h for ax in range(fe.dim)]
    grad = np.zeros(fe.dim)
    for idx in range(fe.num_nodes):
        grad += nodal[idx] * fe.shape_grad(fe.node_tuple(idx), xi)
    return grad / h


def kelly_indicator(mesh, dofs, fe, cell_values, fabric=None):
    """eta_K^2 = sum over faces of (h_F / 24) * int_F [[du/dn]]^2, with
    non-conforming faces integrated over the fine-side pieces and boundary
    faces contributing zero.  Needs ghost-cell values (see
    exchange_ghost_values); runs per rank with no communication."""
    forest = mesh.view.forest
    view = mesh.view
    dim = forest.dim
    scale = float(1 << L_MAX)
    pts1, wts1 = gauss_rule(fe.degree + 1)
    etas = {}
    geo = {}

    def geom(key):
        g = geo.get(key)
        if g is None:
            lo, hi = forest.cell_box(key)
            g = (np.array([c / scale for c in lo]), (hi[0] - lo[0]) / scale)
            geo[key] = g
        return g

    for key in view.local_keys:
        lo_k, h_k = geom(key)
        acc = 0.0
        for face in forest.topo.faces_of_dim(dim - 1):
            sets = view.neighbors(key, face.id)
            pieces = []
            for e in sets.conformal + sets.lower:
                pieces.append((e.key, forest.face_box(key, face.id)))
            for e in sets.higher:
                pieces.append((e.key, forest.face_box(e.key, e.matched_face)))
            for other, piece in pieces:
                if cell_values.get(other) is None:
                    raise RuntimeError(f"missing ghost values for {other}")
                plo, phi = piece
                span = [ax for ax in range(dim) if plo[ax] < phi[ax]]
                nax = next(ax for ax in range(dim) if plo[ax] == phi[ax])
                h_f = (phi[span[0]] - plo[span[0]]) / scale
                measure = h_f ** (dim - 1)
                lo_o, h_o = geom(other)
                qsum = 0.0
                for flat in range(len(pts1) ** len(span)):
                    w = 1.0
                    point = [c / scale for c in plo]
                    for pos, ax in enumerate(span):
                        i = (flat // len(pts1) ** pos) % len(pts1)
                        point[ax] = (plo[ax] + pts1[i] * (phi[ax] - plo[ax])) / scale
                        w *= wts1[i]
                    ga = _grad_at(fe, lo_k, h_k, cell_values[key], point)
                    gb = _grad_at(fe, lo_o, h_o, cell_values[other], point)
                    qsum += w * (ga[nax] - gb[nax]) ** 2
                acc += (h_f / 24.0) * measure * qsum
        etas[key] = math.sqrt(acc)
    return etas


def mark_cells(etas_per_rank, refine_fraction, coarsen_fraction, fabric):
    """Distributed 25-iteration bisection on the refine/coarsen thresholds:
    cells with indicator above theta_r are refined, below theta_c coarsened.
    Comparisons are strict, so all-equal indicators yield all-KEEP (or
    all-REFINE when the fraction is 1)."""
    total = fabric.allreduce([len(e) for e in etas_per_rank], "sum")[0]
    flags = {}
    if total == 0:
        return flags
    big = float("inf")
    gmin = fabric.allreduce(
        [min(e.values()) if e else big for e in etas_per_rank], "min")[0]
    gmax = fabric.allreduce(
        [max(e.values()) if e else -big for e in etas_per_rank], "max")[0]

    def count(pred):
        return fabric.allreduce(
            [sum(1 for v in e.values() if pred(v)) for e in etas_per_rank],
            "sum")[0]

    def bisect(target, above):
        lo, hi = gmin, gmax
        for _ in range(25):
            mid = 0.5 * (lo + hi)
            if above:
                c = count(lambda v: v > mid)
                lo, hi = (mid, hi) if c > target else (lo, mid)
            else:
                c = count(lambda v: v < mid)
                lo, hi = (lo, mid) if c > target else (mid, hi)
        return 0.5 * (lo + hi)

    theta_r = None
    if refine_fraction >= 1.0:
        theta_r = gmin - 1.0
    elif refine_fraction > 0.0:
        theta_r = bisect(refine_fraction * total, above=True)
    theta_c = None
    if coarsen_fraction > 0.0:
        theta_c = bisect(coarsen_fraction * total, above=False)
    for etas in etas_per_rank:
        for key, v in etas.items():
            if theta_r is not None and v > theta_r:
                flags[key] = REFINE
            elif theta_c is not None and v < theta_c:
                flags[key] = COARSEN
            else:
                flags[key] = KEEP
    return flags


# -- mesh-handling primitives ---------------------------------------------------------


def _mean_bytes(vals):
    return struct.pack("<d", float(np.mean(vals)))


def _coarsen_payload(fam, vals):
    nums = [struct.unpack("<d", v)[0] for v in vals if v is not None]
    return struct.pack("<d", sum(nums) / len(nums)) if nums else b""


def refine_and_coarsen(forest, flags, k, s, fabric):
    """Adapt -> Balance(k) -> Ghost(s); cell payloads follow the cells."""
    forest = adapt(forest, flags, coarsen_transfer=_coarsen_payload)
    forest = balance(forest, k)
    views = ghost(forest, s)
    return forest, views


def redistribute(forest, s, fabric):
    """Partition with unit weights (imbalance <= 1 afterwards) + Ghost."""
    forest = partition(forest)
    views = ghost(forest, s)
    return forest, views


# -- per-step statistics ---------------------------------------------------------------


@dataclass
class StepStats:
    step: int
    stages: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)
    dofs: dict = field(default_factory=dict)
    fabric: dict = field(default_factory=dict)
    solve_iters: int = 0
    marked: dict = field(default_factory=dict)
    l2_error: float | None = None

    def finish(self):
        subs = ("MESH", "FE_SPACE_SUB_ASSEMBLY", "ASSEMBLY_SUB_ASSEMBLY",
                "ERROR_ESTIMATOR")
        fulls = ("MESH", "FE_SPACE_FULL_ASSEMBLY", "ASSEMBLY_FULL_ASSEMBLY",
                 "ERROR_ESTIMATOR")
        self.stages["TOTAL_SUB_ASSEMBLY"] = sum(self.stages[s] for s in subs)
        self.stages["TOTAL_FULL_ASSEMBLY"] = sum(self.stages[s] for s in fulls)

    def as_dict(self):
        out = {"step": self.step, "stages": self.stages, "cells": self.cells,
               "dofs": self.dofs, "fabric": self.fabric,
               "solve_iters": self.solve_iters, "marked": self.marked}
        if self.l2_error is not None:
            out["l2_error"] = self.l2_error
        return out


class _StageClock:
    def __init__(self, stats: StepStats, fabric: Fabric):
        self.stats = stats
        self.fabric = fabric

    def measure(self, name, fn):
        r0, b0 = self.fabric.rounds, self.fabric.bytes_moved
        t0 = time.perf_counter()
        out = fn()
        self.stats.stages[name] = self.stats.stages.get(name, 0.0) + \
            (time.perf_counter() - t0)
        fb = self.stats.fabric.setdefault(name, {"rounds": 0, "bytes": 0})
        fb["rounds"] += self.fabric.rounds - r0
        fb["bytes"] += self.fabric.bytes_moved - b0
        return out


def rank_loop_max(stats: StepStats, name, fns):
    """Run one callable per rank, recording the slowest rank's wall time."""
    outs, worst = [], 0.0
    for fn in fns:
        t0 = time.perf_counter()
        outs.append(fn())
        worst = max(worst, time.perf_counter() - t0)
    stats.stages[name] = stats.stages.get(name, 0.0) + worst
    return outs


def l2_error(meshes, dofmaps, fe, cell_values, exact, fabric):
    pts, wts = gauss_rule(fe.degree + 2)
    scale = float(1 << L_MAX)
    dim = fe.dim
    parts = []
    for mesh, dofs, values in zip(meshes, dofmaps, cell_values):
        acc = 0.0
        for key in mesh.view.local_keys:
            lo, hi = mesh.view.forest.cell_box(key)
            lof = np.array([c / scale for c in lo])
            h = (hi[0] - lo[0]) / scale
            nodal = values[key]
            for flat in range(len(pts) ** dim):
                w, xi, p = 1.0, [], []
                for ax in range(dim):
                    i = (flat // len(pts) ** ax) % len(pts)
                    xi.append(pts[i])
                    p.append(lof[ax] + h * pts[i])
                    w *= wts[i]
                uh = sum(nodal[idx] * fe.shape_value(fe.node_tuple(idx), xi)
                         for idx in range(fe.num_nodes))
                acc += w * (h ** dim) * (uh - exact(p)) ** 2
        parts.append(acc)
    return math.sqrt(fabric.allreduce(parts, "sum")[0])


@dataclass
class AmrResult:
    config: AmrConfig
    stats: list
    fingerprint: str
    forest: Forest
    flags_per_step: list


def run_amr(config: AmrConfig) -> AmrResult:
    config.validate()
    f_rhs, exact = make_problem(config)
    fe = make_lagrangian(config.dim, config.degree)
    fabric = Fabric(config.ranks)
    conn = BrickConnectivity((1,) * config.dim)
    k, s, k_mesh = config.k_balance, config.effective_s(), config.mesh_filter_k()
    strict = not config.allow_unsafe_k
    forest = new_forest(conn, config.start_level(), config.ranks)
    flags = None
    digest = hashlib.sha256()
    all_stats, flags_per_step = [], []
    views = None
    for step in range(config.steps):
        st = StepStats(step)
        clock = _StageClock(st, fabric)

        def mesh_stage():
            nonlocal forest, views
            if step == 0:
                forest = balance(forest, k)
                views = ghost(forest, s)
            else:
                forest, views = refine_and_coarsen(forest, flags, k, s, fabric)
                forest, views = redistribute(forest, s, fabric)
            complete_ghost_neighbors(views, fabric)
            return [build_femesh(v, k_mesh, strict=strict) for v in views]

        meshes = clock.measure("MESH", mesh_stage)

        def fespace_sub():
            dms = [enumerate_dofs(m, fe) for m in meshes]
            css = [build_constraints(m, fe, dm)
                   for m, dm in zip(meshes, dms)]
            owns = compute_ownership(meshes, dms, fabric)
            pats = [build_comm_pattern(o, d) for o, d in zip(owns, dms)]
            return dms, css, owns, pats

        dms, css, owns, pats = clock.measure("FE_SPACE_SUB_ASSEMBLY", fespace_sub)
        gids, offsets = clock.measure(
            "FE_SPACE_FULL_ASSEMBLY",
            lambda: global_numbering(owns, dms, pats, fabric))
        st.stages["FE_SPACE_FULL_ASSEMBLY"] += st.stages["FE_SPACE_SUB_ASSEMBLY"]

        systems = clock.measure(
            "ASSEMBLY_SUB_ASSEMBLY",
            lambda: [assemble_subassembled(m, fe, dm, cs, f_rhs)
                     for m, dm, cs in zip(meshes, dms, css)])
        fulls = clock.measure(
            "ASSEMBLY_FULL_ASSEMBLY",
            lambda: assemble_fully(systems, gids, offsets, fabric))
        st.stages["ASSEMBLY_FULL_ASSEMBLY"] += st.stages["ASSEMBLY_SUB_ASSEMBLY"]

        xs, iters = clock.measure(
            "SOLVE",
            lambda: cg_solve_subassembled(systems, pats, owns, fabric,
                                          tol=config.cg_tol))
        st.solve_iters = iters

        def estimate():
            values = [recover_nodal_values(m, dm, cs, x)
                      for m, dm, cs, x in zip(meshes, dms, css, xs)]
            merged = exchange_ghost_values(meshes, values, fabric)
            etas = [kelly_indicator(m, dm, fe, vals)
                    for m, dm, vals in zip(meshes, dms, merged)]
            new_flags = mark_cells(etas, config.refine_fraction,
                                   config.coarsen_fraction, fabric)
            return values, etas, new_flags

        values, etas, flags = clock.measure("ERROR_ESTIMATOR", estimate)
        flags_per_step.append(dict(flags))

        # bookkeeping
        counts = [forest.offsets[p + 1] - forest.offsets[p]
                  for p in range(config.ranks)]
        st.cells = {"total": forest.num_leaves,
                    "min_per_rank": min(counts), "max_per_rank": max(counts)}
        hanging_keys = set()
        for mesh, dm in zip(meshes, dms):
            for g in range(dm.num_dofs):
                if dm.hanging[g] and dm.local[g]:
                    vef = mesh.vefs[dm.dof_vef[g]]
                    hanging_keys.add((vef.box, dm.dof_slot[g]))
        regular = offsets[-1]
        st.dofs = {"regular": regular, "hanging": len(hanging_keys),
                   "total": regular + len(hanging_keys)}
        st.marked = {
            "refine": sum(1 for v in flags.values() if v == REFINE),
            "coarsen": sum(1 for v in flags.values() if v == COARSEN)}
        if exact is not None:
            st.l2_error = l2_error(meshes, dms, fe, values, exact, fabric)
        st.finish()
        all_stats.append(st)

        # attach per-cell solution means as payload (transfer diagnostics)
        for mesh, vals in zip(meshes, values):
            for key, nodal in vals.items():
                forest.payload[key] = _mean_bytes(nodal)

        # determinism fingerprint: mesh + flags + solution, no wall times
        from .forest import forest_to_bytes
        digest.update(forest_to_bytes(forest))
        for p in range(config.ranks):
            digest.update(xs[p].tobytes())
        digest.update(json.dumps(sorted(
            (str(k), v) for k, v in flags.items())).encode())

        if config.vtk_prefix:
            eta_map = {k: v for e in etas for k, v in e.items()}
            rank_map, level_map, point_u = {}, {}, {}
            for p, mesh in enumerate(meshes):
                for key in mesh.view.local_keys:
                    rank_map[key] = p
                    level_map[key] = key.level
                    nodal = values[p][key]
                    corners = []
                    for c in range(1 << config.dim):
                        t = tuple(((c >> ax) & 1) * fe.degree
                                  for ax in range(config.dim))
                        corners.append(nodal[fe.node_index(t)])
                    point_u[key] = corners
            write_vtk(f"{config.vtk_prefix}_{step:03d}.vtk", forest,
                      {"rank": rank_map, "level": level_map, "eta": eta_map},
                      point_u)

    result = AmrResult(config, all_stats, digest.hexdigest(), forest,
                       flags_per_step)
    if config.stats_path:
        payload = {"config": vars(config).copy(),
                   "fingerprint": result.fingerprint,
                   "steps": [s.as_dict() for s in all_stats]}
        with open(config.stats_path, "w") as out:
            json.dump(payload, out, indent=1, sort_keys=True)
    if config.comm_log_path:
        with open(config.comm_log_path, "w") as out:
            for round_id, src, dst, nbytes in fabric.round_log:
                out.write(json.dumps({"round": round_id, "src": src,
                                      "dst": dst, "bytes": nbytes}) + "\n")
    return result


def validate_stats(stats_dict):
    import jsonschema
    jsonschema.validate(stats_dict, STATS_SCHEMA)


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="amrrun",
        description="forest-of-trees AMR Poisson pipeline (simulated ranks)")
    ap.add_argument("--dim", type=int, default=2, choices=(2, 3))
    ap.add_argument("--degree", type=int, default=1, choices=(1, 2))
    ap.add_argument("--ranks", type=int, default=4)
    ap.add_argument("--k-balance", type=int, default=1)
    ap.add_argument("--s-ghost", type=int, default=None)
    ap.add_argument("--steps", type=int, default=6)
    ap.add_argument("--refine-frac", type=float, default=0.15)
    ap.add_argument("--coarsen-frac", type=float, default=0.03)
    ap.add_argument("--problem", default="sinusoid",
                    choices=("sinusoid", "manufactured"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--initial-level", type=int, default=None)
    ap.add_argument("--stats", dest="stats_path", default=None)
    ap.add_argument("--vtk", dest="vtk_prefix", default=None)
    ap.add_argument("--allow-unsafe-k", action="store_true")
    ap.add_argument("--comm-log", dest="comm_log_path", default=None)
    args = ap.parse_args(argv)
    config = AmrConfig(dim=args.dim, degree=args.degree, ranks=args.ranks,
                       k_balance=args.k_balance, s_ghost=args.s_ghost,
                       steps=args.steps, refine_fraction=args.refine_frac,
                       coarsen_fraction=args.coarsen_frac,
                       problem=args.problem, seed=args.seed,
                       initial_level=args.initial_level,
                       allow_unsafe_k=args.allow_unsafe_k,
                       stats_path=args.stats_path, vtk_prefix=args.vtk_prefix,
                       comm_log_path=args.comm_log_path)
    result = run_amr(config)
    last = result.stats[-1]
    print(f"steps={len(result.stats)} cells={last.cells['total']} "
          f"dofs={last.dofs['total']} fingerprint={result.fingerprint[:16]}")
    return 0
