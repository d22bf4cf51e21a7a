"""Continuous Lagrange P_k spaces on triangles, fields and sparse assembly primitives."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import LOCAL_EDGES, Mesh, RegionMask
from .quadrature import interval_rule, triangle_rule

SUPPORTED_DEGREES = (1, 2, 3)
MASS_RTOL = 1e-12


# {{{ reference element


def _monomial_exponents(k):
    return [(i, j) for n in range(k + 1) for i in range(n, -1, -1) for j in [n - i]]


@lru_cache(maxsize=None)
def reference_nodes(k: int) -> np.ndarray:
    """Barycentric coordinates of the local nodes: vertices, then edges (in LOCAL_EDGES order), then interior."""
    nodes = [np.eye(3)[i] for i in range(3)]
    for a, b in LOCAL_EDGES:
        for m in range(1, k):
            lam = np.zeros(3)
            lam[a] = (k - m) / k
            lam[b] = m / k
            nodes.append(lam)
    for i in range(1, k):
        for j in range(1, k - i):
            lam = np.array([k - i - j, i, j], dtype=float) / k
            nodes.append(lam)
    return np.array(nodes)


def _vandermonde(k, xy):
    exps = _monomial_exponents(k)
    x, y = xy[:, 0], xy[:, 1]
    V = np.stack([x**i * y**j for i, j in exps], axis=1)
    dx = np.stack([i * x ** max(i - 1, 0) * y**j if i else 0 * x for i, j in exps], axis=1)
    dy = np.stack([j * x**i * y ** max(j - 1, 0) if j else 0 * x for i, j in exps], axis=1)
    return V, dx, dy


@lru_cache(maxsize=None)
def _basis_coefficients(k):
    nodes = reference_nodes(k)
    V, _, _ = _vandermonde(k, nodes[:, 1:])
    return np.linalg.inv(V)


def reference_basis(k: int, bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(n, nloc)`` and reference gradients ``(n, nloc, 2)`` at barycentric points."""
    bary = np.atleast_2d(bary)
    C = _basis_coefficients(k)
    V, dx, dy = _vandermonde(k, bary[:, 1:])
    return V @ C, np.stack([dx @ C, dy @ C], axis=-1)


def n_local_dofs(k: int) -> int:
    return (k + 1) * (k + 2) // 2


# }}}


# {{{ sparse assembly


class SparseAssembler:
    """Scatter stacks of local matrices into a fixed CSR pattern.

    ``dofs`` has shape ``(n_blocks, m)``.  The pattern and the map from
    local entries to CSR slots are computed once, so reassembly with new
    block coefficients is a single sparse mat-vec.
    """

    def __init__(self, dofs: np.ndarray, n: int):
        self.dofs = np.asarray(dofs)
        self.n = n
        nb, m = self.dofs.shape
        rows = np.repeat(self.dofs, m, axis=1).ravel()
        cols = np.tile(self.dofs, (1, m)).ravel()
        keys = rows.astype(np.int64) * n + cols
        uniq, self.slot = np.unique(keys, return_inverse=True)
        self.indices = (uniq % n).astype(np.int32)
        urows = uniq // n
        self.indptr = np.searchsorted(urows, np.arange(n + 1)).astype(np.int32)
        self.nnz = len(uniq)

    def _csr(self, data):
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))

    def matrix(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.slot, weights=np.asarray(local).ravel(), minlength=self.nnz)
        return self._csr(data)

    def weighted(self, local: np.ndarray) -> Callable[[np.ndarray], sp.csr_matrix]:
        """Return ``c -> sum_b c[b] * local[b]`` as a CSR matrix builder."""
        nb = len(local)
        m2 = local.shape[1] * local.shape[2]
        B = sp.csr_matrix(
            (np.asarray(local).ravel(), (self.slot, np.repeat(np.arange(nb), m2))),
            shape=(self.nnz, nb),
        )

        def build(c):
            return self._csr(B @ np.asarray(c, dtype=float))

        return build

    def vector(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.dofs.ravel(), weights=np.asarray(local).ravel(), minlength=self.n)


# }}}


@dataclass(eq=False)
class Space:
    """Continuous P_k space; periodic slave nodes share their master's DOF."""

    mesh: Mesh
    k: int
    dof_map: np.ndarray
    dof_coords: np.ndarray
    n_dofs: int

    @property
    def n_local(self) -> int:
        return n_local_dofs(self.k)

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    # {{{ geometry

    @cached_property
    def jacobian(self) -> np.ndarray:
        p = self.mesh.vertices[self.mesh.triangles]
        return np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)

    @cached_property
    def det(self) -> np.ndarray:
        B = self.jacobian
        return B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]

    @cached_property
    def inv_jacobian_t(self) -> np.ndarray:
        return np.transpose(np.linalg.inv(self.jacobian), (0, 2, 1))

    def physical_points(self, bary: np.ndarray, elements=None) -> np.ndarray:
        """Map barycentric points ``(n, 3)`` to ``(n_el, n, 2)``."""
        tri = self.mesh.triangles if elements is None else self.mesh.triangles[elements]
        p = self.mesh.vertices[tri]
        return np.einsum("qa,ead->eqd", np.atleast_2d(bary), p)

    def tabulate(self, bary: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Basis values ``(n, nloc)`` and physical gradients ``(n_el, n, nloc, 2)``."""
        phi, dphi = reference_basis(self.k, bary)
        return phi, np.einsum("eij,qaj->eqai", self.inv_jacobian_t, dphi)

    # }}}

    # {{{ element quadrature

    @cached_property
    def quad(self):
        return triangle_rule(2 * self.k + 2)

    @cached_property
    def qp_x(self) -> np.ndarray:
        return self.physical_points(self.quad.points)

    @cached_property
    def qp_w(self) -> np.ndarray:
        return np.abs(self.det)[:, None] * self.quad.weights[None, :]

    @cached_property
    def _qp_tab(self):
        return self.tabulate(self.quad.points)

    @property
    def qp_phi(self) -> np.ndarray:
        return self._qp_tab[0]

    @property
    def qp_dphi(self) -> np.ndarray:
        return self._qp_tab[1]

    @cached_property
    def sample_bary(self) -> np.ndarray:
        """Points used for elementwise sup-norms: quadrature points plus local nodes."""
        return np.vstack([self.quad.points, reference_nodes(self.k)])

    @cached_property
    def _sample_tab(self):
        return self.tabulate(self.sample_bary)

    # }}}

    # {{{ facet quadrature

    @cached_property
    def facet_quad(self):
        return interval_rule(2 * self.k + 1)

    def _edge_bary(self, edges, s):
        """Barycentric points ``(n_f, nq, 3)`` at parameters ``s`` along local edges."""
        a = LOCAL_EDGES[edges, 0]
        b = LOCAL_EDGES[edges, 1]
        lam = np.zeros((len(edges), len(s), 3))
        r = np.arange(len(edges))
        lam[r, :, a] = 1.0 - s[None, :]
        lam[r, :, b] += s[None, :]
        return lam

    def _facet_eval(self, elements, edges, s):
        lam = self._edge_bary(edges, s)
        C = _basis_coefficients(self.k)
        flat = lam.reshape(-1, 3)
        V, dx, dy = _vandermonde(self.k, flat[:, 1:])
        nq = len(s)
        phi = (V @ C).reshape(len(elements), nq, -1)
        dref = np.stack([dx @ C, dy @ C], axis=-1).reshape(len(elements), nq, -1, 2)
        dphi = np.einsum("fij,fqaj->fqai", self.inv_jacobian_t[elements], dref)
        x = np.einsum("fqa,fad->fqd", lam, self.mesh.vertices[self.mesh.triangles[elements]])
        return phi, dphi, x

    def _facet_geometry(self, facets):
        m = self.mesh
        pv = m.vertices[m.facet_vertices[facets]]
        t = pv[:, 1] - pv[:, 0]
        length = np.linalg.norm(t, axis=1)
        n = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
        # orient outward from the left element
        c = m.centroids[m.facet_left[facets]]
        flip = np.einsum("fd,fd->f", n, pv[:, 0] - c) < 0
        n[flip] *= -1
        return length, n

    def facet_points(self, s: np.ndarray, facets=None):
        """Physical points on the left side of ``facets`` at parameters ``s``."""
        m = self.mesh
        facets = np.arange(m.n_facets) if facets is None else facets
        _, _, x = self._facet_eval(m.facet_left[facets], m.facet_edge_left[facets], s)
        return x

    def jump_operator(self, s: np.ndarray):
        """Normal-gradient jump stencils on interior facets at parameters ``s``.

        Returns ``(facets, dofs (nf, 2 nloc), G (nf, nq, 2 nloc), length, normal, x)``
        with ``G @ u[dofs]`` the jump of grad(u).n (n outward from the left element).
        """
        m = self.mesh
        fi = m.interior_facets
        L, R = m.facet_left[fi], m.facet_right[fi]
        _, dL, x = self._facet_eval(L, m.facet_edge_left[fi], s)
        dR = np.empty_like(dL)
        flip = m.facet_flip[fi]
        for sel, sr in ((~flip, s), (flip, 1.0 - s)):
            if sel.any():
                _, dR[sel], _ = self._facet_eval(R[sel], m.facet_edge_right[fi][sel], sr)
        length, n = self._facet_geometry(fi)
        G = np.concatenate(
            [np.einsum("fqad,fd->fqa", dL, n), -np.einsum("fqad,fd->fqa", dR, n)], axis=2
        )
        dofs = np.concatenate([self.dof_map[L], self.dof_map[R]], axis=1)
        return fi, dofs, G, length, n, x

    @cached_property
    def interior_jumps(self):
        return self.jump_operator(self.facet_quad.points)

    @cached_property
    def boundary_facets(self):
        """``(facets, elements, phi (nf, nq, nloc), x, length, outward normal)`` on the physical boundary."""
        m = self.mesh
        fb = m.boundary_facets
        phi, _, x = self._facet_eval(m.facet_left[fb], m.facet_edge_left[fb], self.facet_quad.points)
        length, n = self._facet_geometry(fb)
        return fb, m.facet_left[fb], phi, x, length, n

    # }}}

    # {{{ assembly

    @cached_property
    def element_assembler(self) -> SparseAssembler:
        return SparseAssembler(self.dof_map, self.n_dofs)

    @cached_property
    def facet_assembler(self) -> SparseAssembler:
        return SparseAssembler(self.interior_jumps[1], self.n_dofs)

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return assemble_mass(self)

    @cached_property
    def _mass_diag_inv(self):
        return sp.diags(1.0 / self.mass.diagonal())

    def solve_mass(self, b: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        """Jacobi-preconditioned CG on the mass matrix to relative residual 1e-12."""
        b = np.asarray(b, dtype=float)
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b)
        x, info = spla.cg(self.mass, b, x0=x0, rtol=MASS_RTOL, atol=0.0, maxiter=10 * self.n_dofs, M=self._mass_diag_inv)
        if info != 0:
            raise RuntimeError(f"mass solve did not converge (info={info})")
        return x

    # }}}


@dataclass(eq=False)
class Field:
    space: Space
    coefficients: np.ndarray
    time: float | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.n_dofs,):
            raise ValueError(f"expected {self.space.n_dofs} coefficients, got {self.coefficients.shape}")

    def local(self) -> np.ndarray:
        return self.coefficients[self.space.dof_map]

    def values_at_qp(self) -> np.ndarray:
        return self.local() @ self.space.qp_phi.T

    def grads_at_qp(self) -> np.ndarray:
        return np.einsum("ea,eqad->eqd", self.local(), self.space.qp_dphi)

    def as_dg(self) -> DGField:
        return DGField(self.space, self.local())


@dataclass(eq=False)
class DGField:
    """Elementwise P_k data in the local node basis of ``space``, without inter-element continuity."""

    space: Space
    blocks: np.ndarray

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.shape != (self.space.n_elements, self.space.n_local):
            raise ValueError(f"DG blocks must have shape {(self.space.n_elements, self.space.n_local)}")

    def values_at_qp(self) -> np.ndarray:
        return self.blocks @ self.space.qp_phi.T


def build_space(mesh: Mesh, k: int) -> Space:
    if k not in SUPPORTED_DEGREES:
        raise ValueError(f"unsupported degree {k}; choose one of {SUPPORTED_DEGREES}")
    nodes = reference_nodes(k)
    x = np.einsum("qa,ead->eqd", nodes, mesh.vertices[mesh.triangles])
    nx, ny = mesh.metadata["nx"], mesh.metadata["ny"]
    x0, x1, y0, y1 = mesh.domain
    # all nodes sit on a lattice of spacing (cell size)/k
    ix = np.rint((x[..., 0] - x0) / (x1 - x0) * nx * k).astype(np.int64)
    iy = np.rint((x[..., 1] - y0) / (y1 - y0) * ny * k).astype(np.int64)
    if mesh.periodic[0]:
        ix %= nx * k
    if mesh.periodic[1]:
        iy %= ny * k
    keys = iy * (nx * k + 1) + ix
    uniq, inv = np.unique(keys.ravel(), return_inverse=True)
    dof_map = inv.reshape(keys.shape)
    uy, ux = np.divmod(uniq, nx * k + 1)
    coords = np.column_stack([x0 + ux * (x1 - x0) / (nx * k), y0 + uy * (y1 - y0) / (ny * k)])
    return Space(mesh=mesh, k=k, dof_map=dof_map, dof_coords=coords, n_dofs=len(uniq))


def interpolate_nodal(space: Space, g: Callable, time: float | None = None) -> Field:
    """Nodal interpolant; ``g`` takes an ``(n, 2)`` array of points (and ``t`` if ``time`` is given)."""
    vals = g(space.dof_coords) if time is None else g(space.dof_coords, time)
    vals = np.broadcast_to(np.asarray(vals, dtype=float), (space.n_dofs,)).copy()
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite value of g at a DOF")
    return Field(space, vals, time)


def evaluate(fld: Field | DGField, element: int, bary) -> tuple[float, np.ndarray]:
    """Value and physical gradient of the local polynomial on ``element``."""
    bary = np.asarray(bary, dtype=float)
    if abs(bary.sum() - 1.0) > 1e-12:
        raise ValueError("barycentric coordinates must sum to 1")
    sp_ = fld.space
    phi, dref = reference_basis(sp_.k, bary[None, :])
    coef = fld.local()[element] if isinstance(fld, Field) else fld.blocks[element]
    grad = sp_.inv_jacobian_t[element] @ (dref[0].T @ coef)
    return float(phi[0] @ coef), grad


def integrate(space: Space, integrand: Callable | np.ndarray, region: RegionMask | None = None) -> float:
    """Sum of quadrature-evaluated integrand over (selected) elements.

    ``integrand`` is either values at quadrature points ``(n_el, nq)`` or a
    callable taking the physical quadrature points ``(n_el, nq, 2)``.
    """
    vals = integrand(space.qp_x) if callable(integrand) else integrand
    vals = np.broadcast_to(vals, space.qp_w.shape)
    per_el = np.einsum("eq,eq->e", vals, space.qp_w)
    if region is not None:
        if len(region) != space.n_elements:
            raise ValueError("region length does not match the mesh")
        per_el = per_el[region.elements]
    return float(per_el.sum())


def assemble_mass(space: Space) -> sp.csr_matrix:
    phi = space.qp_phi
    ref = np.einsum("q,qa,qb->ab", space.quad.weights, phi, phi)
    local = np.abs(space.det)[:, None, None] * ref[None]
    return space.element_assembler.matrix(local)


def assemble_load(space: Space, values_at_qp: np.ndarray) -> np.ndarray:
    """Vector ``b_i = (g, phi_i)`` from values of ``g`` at quadrature points."""
    local = np.einsum("eq,eq,qa->ea", values_at_qp, space.qp_w, space.qp_phi)
    return space.element_assembler.vector(local)


def assemble_stiffness_blocks(space: Space) -> np.ndarray:
    """Local matrices ``int_T grad phi_a . grad phi_b``, shape ``(n_el, nloc, nloc)``."""
    return np.einsum("eq,eqad,eqbd->eab", space.qp_w, space.qp_dphi, space.qp_dphi)
