"""Quadrature on the reference triangle and the unit interval."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # barycentric coordinates (n, 3) on triangles, parameter in [0, 1] on intervals
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Collapsed (Stroud conical product) rule on the reference triangle, weights sum to 1/2."""
    n = max(1, (degree + 2) // 2)
    xi, wx = roots_jacobi(n, 1.0, 0.0)
    eta, wy = roots_legendre(n)
    u = 0.5 * (1.0 + xi)
    v = 0.5 * (1.0 + eta)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(0.25 * wx, 0.5 * wy)
    x = U.ravel()
    y = (V * (1.0 - U)).ravel()
    bary = np.column_stack([1.0 - x - y, x, y])
    return QuadratureRule(bary, W.ravel(), degree)


@lru_cache(maxsize=None)
def interval_rule(degree: int) -> QuadratureRule:
    """Gauss-Legendre on [0, 1], weights sum to 1."""
    n = max(1, (degree + 2) // 2)
    s, w = roots_legendre(n)
    return QuadratureRule(0.5 * (1.0 + s), 0.5 * w, degree)


@lru_cache(maxsize=None)
def composite_triangle_rule(degree: int, m: int) -> QuadratureRule:
    """``triangle_rule(degree)`` repeated on the ``m**2`` congruent sub-triangles.

    Meant for integrands that are only piecewise smooth inside an element
    (errors against a discontinuous exact solution).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    base = triangle_rule(degree)
    xy = base.points[:, 1:]
    corners = []
    for i in range(m):
        for j in range(m - i):
            corners.append([(i, j), (i + 1, j), (i, j + 1)])
            if i + j < m - 1:
                corners.append([(i + 1, j), (i + 1, j + 1), (i, j + 1)])
    c = np.asarray(corners, dtype=float) / m  # (n_sub, 3, 2)
    pts = c[:, 0, None, :] + xy[None, :, 0, None] * (c[:, 1] - c[:, 0])[:, None, :] + xy[None, :, 1, None] * (c[:, 2] - c[:, 0])[:, None, :]
    pts = pts.reshape(-1, 2)
    bary = np.column_stack([1.0 - pts.sum(axis=1), pts])
    w = np.tile(base.weights, len(corners)) / m**2
    return QuadratureRule(bary, w, degree)
