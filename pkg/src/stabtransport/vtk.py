"""Legacy ASCII VTK output (unstructured grid of triangles).

Each P_k element is split into the ``k**2`` sub-triangles of its lattice
so higher-order fields are not reduced to their vertex values.  Element
data (switch, residual indicator) is repeated on every sub-triangle.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fe_space import Field, Space, reference_basis

VTK_TRIANGLE = 5


def _lattice(k: int):
    """Barycentric lattice points of spacing ``1/k`` and the sub-triangles joining them."""
    idx = {}
    pts = []
    for j in range(k + 1):
        for i in range(k + 1 - j):
            idx[i, j] = len(pts)
            pts.append((i / k, j / k))
    tris = []
    for j in range(k):
        for i in range(k - j):
            tris.append((idx[i, j], idx[i + 1, j], idx[i, j + 1]))
            if i + j < k - 1:
                tris.append((idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]))
    xy = np.asarray(pts)
    return np.column_stack([1.0 - xy.sum(axis=1), xy]), np.asarray(tris)


def write_vtk(
    path,
    space: Space,
    point_data: dict[str, Field] | None = None,
    cell_data: dict[str, np.ndarray] | None = None,
    title: str = "stabtransport",
) -> Path:
    point_data = point_data or {}
    cell_data = cell_data or {}
    k = max(space.k, 1)
    bary, sub = _lattice(k)
    n_el, n_loc = space.n_elements, len(bary)
    x = space.physical_points(bary).reshape(-1, 2)
    cells = (sub[None, :, :] + n_loc * np.arange(n_el)[:, None, None]).reshape(-1, 3)
    basis, _ = reference_basis(space.k, bary)

    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {len(x)} double")
    lines += [f"{float(a)!r} {float(b)!r} 0.0" for a, b in x]
    lines.append(f"CELLS {len(cells)} {4 * len(cells)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(VTK_TRIANGLE)] * len(cells)
    if point_data:
        lines.append(f"POINT_DATA {len(x)}")
        for name, fld in point_data.items():
            if fld.space is not space:
                raise ValueError(f"point field {name!r} lives on another space")
            vals = (fld.local() @ basis.T).ravel()
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in vals]
    if cell_data:
        lines.append(f"CELL_DATA {len(cells)}")
        for name, arr in cell_data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (n_el,):
                raise ValueError(f"cell field {name!r} has shape {arr.shape}, expected ({n_el},)")
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in np.repeat(arr, len(sub))]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk_sections(path) -> dict[str, list[str]]:
    """Split a legacy file written by :func:`write_vtk` into its keyword sections (for checks)."""
    out: dict[str, list[str]] = {}
    current = None
    for line in Path(path).read_text().splitlines()[4:]:
        head = line.split(" ", 1)[0]
        if head in ("POINTS", "CELLS", "CELL_TYPES", "POINT_DATA", "CELL_DATA", "SCALARS"):
            current = line if head == "SCALARS" else head
            out[current] = []
        elif head == "LOOKUP_TABLE":
            continue
        elif current is not None:
            out[current].append(line)
    return out
