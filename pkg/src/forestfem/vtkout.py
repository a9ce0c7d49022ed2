"""Legacy ASCII VTK unstructured-grid writer (no external dependency)."""

from __future__ import annotations

from .morton import L_MAX

VTK_QUAD = 9
VTK_HEXAHEDRON = 12

# corner order expected by VTK, as z-order child indices
_QUAD_ORDER = (0, 1, 3, 2)
_HEX_ORDER = (0, 1, 3, 2, 4, 5, 7, 6)


def write_vtk(path, forest, cell_data: dict, point_u: dict | None = None):
    """Write the leaf mesh with per-cell scalar fields and an optional
    per-cell corner-value field ``u`` (shared points keep the last value).

    ``cell_data`` maps field name -> {leaf key: value}; ``point_u`` maps
    leaf key -> sequence of corner values in z-order.
    """
    dim = forest.dim
    scale = float(1 << L_MAX)
    points: dict[tuple, int] = {}
    cells = []
    keys = list(forest.iter_leaves())
    for key in keys:
        lo, hi = forest.cell_box(key)
        ids = []
        for c in range(1 << dim):
            corner = tuple(hi[ax] if (c >> ax) & 1 else lo[ax]
                           for ax in range(dim))
            pid = points.setdefault(corner, len(points))
            ids.append(pid)
        cells.append(ids)
    uvals = [0.0] * len(points)
    if point_u is not None:
        for key, ids in zip(keys, cells):
            vals = point_u.get(key)
            if vals is None:
                continue
            for c, pid in enumerate(ids):
                uvals[pid] = float(vals[c])
    order = _QUAD_ORDER if dim == 2 else _HEX_ORDER
    ctype = VTK_QUAD if dim == 2 else VTK_HEXAHEDRON
    with open(path, "w") as out:
        out.write("# vtk DataFile Version 3.0\n")
        out.write("forestfem adaptive mesh\nASCII\n")
        out.write("DATASET UNSTRUCTURED_GRID\n")
        out.write(f"POINTS {len(points)} double\n")
        for corner in points:
            xyz = [c / scale for c in corner] + [0.0] * (3 - dim)
            out.write(" ".join(f"{c:.12g}" for c in xyz) + "\n")
        npc = 1 << dim
        out.write(f"CELLS {len(cells)} {len(cells) * (npc + 1)}\n")
        for ids in cells:
            out.write(str(npc) + " " + " ".join(str(ids[o]) for o in order) + "\n")
        out.write(f"CELL_TYPES {len(cells)}\n")
        for _ in cells:
            out.write(f"{ctype}\n")
        out.write(f"CELL_DATA {len(cells)}\n")
        for name, data in cell_data.items():
            out.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for key in keys:
                out.write(f"{float(data.get(key, 0.0)):.12g}\n")
        if point_u is not None:
            out.write(f"POINT_DATA {len(points)}\n")
            out.write("SCALARS u double 1\nLOOKUP_TABLE default\n")
            for v in uvals:
                out.write(f"{v:.12g}\n")
