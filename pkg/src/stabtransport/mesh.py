"""Structured triangular meshes of rectangles with optional periodic identification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUNDARY_TAGS = ("left", "right", "bottom", "top")

# local edge e of a triangle joins local vertices LOCAL_EDGES[e]; it is opposite vertex e
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


@dataclass(frozen=True)
class Facet:
    vertices: tuple[int, int]
    left: int
    right: int | str  # element index, or boundary tag


@dataclass(eq=False)
class Mesh:
    """Conforming triangulation of ``[x0, x1] x [y0, y1]``.

    Facets are stored as flat arrays; ``facet_right[i] == -1`` marks a
    boundary facet whose tag is ``facet_tag[i]``.  For a periodic
    interior facet the two sides see geometrically different edges; the
    right side's local edge is ``facet_edge_right`` and ``facet_flip``
    says whether its parametrisation runs opposite to the left one.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    domain: tuple[float, float, float, float]
    periodic: tuple[bool, bool]
    periodic_map: np.ndarray
    facet_vertices: np.ndarray
    facet_left: np.ndarray
    facet_edge_left: np.ndarray
    facet_right: np.ndarray
    facet_edge_right: np.ndarray
    facet_flip: np.ndarray
    facet_tag: np.ndarray
    element_facets: np.ndarray
    element_diameter: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("vertices", "triangles", "facet_vertices", "facet_left", "facet_right"):
            getattr(self, name).setflags(write=False)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_facets(self) -> int:
        return len(self.facet_left)

    @property
    def global_h(self) -> float:
        return float(self.element_diameter.max())

    @property
    def h_min(self) -> float:
        return float(self.element_diameter.min())

    @property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_right >= 0)

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_right < 0)

    @property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def period(self) -> np.ndarray:
        x0, x1, y0, y1 = self.domain
        return np.array([x1 - x0, y1 - y0])

    def facets(self) -> list[Facet]:
        out = []
        for i in range(self.n_facets):
            right = int(self.facet_right[i]) if self.facet_right[i] >= 0 else str(self.facet_tag[i])
            out.append(Facet(tuple(int(v) for v in self.facet_vertices[i]), int(self.facet_left[i]), right))
        return out

    def master_triangles(self) -> np.ndarray:
        """Triangles with every vertex replaced by its periodic master."""
        return self.periodic_map[self.triangles]


def _triangle_inradius(p: np.ndarray) -> np.ndarray:
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    s = 0.5 * (a + b + c)
    area = np.sqrt(np.maximum(s * (s - a) * (s - b) * (s - c), 0.0))
    return area / s


def build_structured_mesh(
    nx: int,
    ny: int,
    domain: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0),
    periodic: tuple[bool, bool] = (False, False),
) -> Mesh:
    """Split an ``nx`` by ``ny`` grid of cells along the lower-left to upper-right diagonal.

    Vertices are numbered row by row with x running fastest, so the unit
    square with ``nx = ny = 1`` has vertices (0,0), (1,0), (0,1), (1,1).
    """
    if nx < 1 or ny < 1:
        raise ValueError(f"need nx, ny >= 1, got ({nx}, {ny})")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate domain {domain}")
    periodic = (bool(periodic[0]), bool(periodic[1]))
    if periodic[0] and nx < 2 or periodic[1] and ny < 2:
        raise ValueError("periodic identification needs at least 2 cells along that axis")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    I, J = np.meshgrid(np.arange(nx), np.arange(ny))
    I, J = I.ravel(), J.ravel()
    v00, v10, v01, v11 = vid(I, J), vid(I + 1, J), vid(I, J + 1), vid(I + 1, J + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    periodic_map = np.arange(len(vertices))
    jj, ii = np.divmod(np.arange(len(vertices)), nx + 1)
    mi = np.where(periodic[0] & (ii == nx), 0, ii)
    mj = np.where(periodic[1] & (jj == ny), 0, jj)
    periodic_map = vid(mi, mj)

    # facet table keyed on master vertex pairs
    n_el = len(triangles)
    mtri = periodic_map[triangles]
    edge_keys = {}
    f_verts, f_left, f_eleft, f_right, f_eright, f_flip = [], [], [], [], [], []
    element_facets = np.empty((n_el, 3), dtype=np.int64)
    for t in range(n_el):
        for e in range(3):
            a, b = LOCAL_EDGES[e]
            ma, mb = mtri[t, a], mtri[t, b]
            key = (min(ma, mb), max(ma, mb))
            if key in edge_keys:
                f = edge_keys.pop(key)
                f_right[f] = t
                f_eright[f] = e
                la, _ = f_verts[f]
                f_flip[f] = periodic_map[la] != ma
                element_facets[t, e] = f
            else:
                f = len(f_left)
                edge_keys[key] = f
                f_verts.append((triangles[t, a], triangles[t, b]))
                f_left.append(t)
                f_eleft.append(e)
                f_right.append(-1)
                f_eright.append(-1)
                f_flip.append(False)
                element_facets[t, e] = f
    facet_vertices = np.array(f_verts, dtype=np.int64)
    facet_right = np.array(f_right, dtype=np.int64)

    tags = np.full(len(f_left), "", dtype=object)
    mid = vertices[facet_vertices].mean(axis=1)
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    bnd = facet_right < 0
    tags[bnd & (np.abs(mid[:, 0] - x0) < tol)] = "left"
    tags[bnd & (np.abs(mid[:, 0] - x1) < tol)] = "right"
    tags[bnd & (np.abs(mid[:, 1] - y0) < tol)] = "bottom"
    tags[bnd & (np.abs(mid[:, 1] - y1) < tol)] = "top"

    p = vertices[triangles]
    edges = np.stack([p[:, 1] - p[:, 2], p[:, 2] - p[:, 0], p[:, 0] - p[:, 1]], axis=1)
    diameter = np.linalg.norm(edges, axis=2).max(axis=1)
    ratio = diameter / _triangle_inradius(p)

    return Mesh(
        vertices=vertices,
        triangles=triangles,
        domain=(x0, x1, y0, y1),
        periodic=periodic,
        periodic_map=periodic_map,
        facet_vertices=facet_vertices,
        facet_left=np.array(f_left, dtype=np.int64),
        facet_edge_left=np.array(f_eleft, dtype=np.int64),
        facet_right=facet_right,
        facet_edge_right=np.array(f_eright, dtype=np.int64),
        facet_flip=np.array(f_flip, dtype=bool),
        facet_tag=tags,
        element_facets=element_facets,
        element_diameter=diameter,
        metadata={"shape_regularity": float(ratio.max()), "nx": nx, "ny": ny},
    )


@dataclass(frozen=True)
class RegionMask:
    elements: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "elements", np.asarray(self.elements, dtype=bool))

    def __len__(self):
        return len(self.elements)

    def complement(self, provenance: str | None = None) -> RegionMask:
        return RegionMask(~self.elements, provenance if provenance is not None else f"not({self.provenance})")


def peel_boundary_layer(mesh: Mesh, region: RegionMask, provenance: str | None = None) -> RegionMask:
    """Drop every element of ``region`` that shares a (periodic master) vertex with the complement."""
    if len(region) != mesh.n_elements:
        raise ValueError(f"mask has {len(region)} entries, mesh has {mesh.n_elements} elements")
    mtri = mesh.master_triangles()
    touched = np.zeros(len(mesh.vertices), dtype=bool)
    touched[mtri[~region.elements].ravel()] = True
    keep = region.elements & ~touched[mtri].any(axis=1)
    return RegionMask(keep, provenance if provenance is not None else f"peel({region.provenance})")
