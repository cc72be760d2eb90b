"""Differential operators on unstructured point clouds.

Derivatives come from a second-order moving-least-squares fit over the k
nearest neighbors of each point, weighted by a Gaussian whose bandwidth is
the mean neighbor distance at that point.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import ROLE_INTERIOR, Shape, pairwise_sqdist
from .oracle import FluidConstants, as_values

DEFAULT_K = 16
MIN_K = 9
_CHUNK = 256

_stencil_cache: "weakref.WeakKeyDictionary[Shape, dict]" = weakref.WeakKeyDictionary()


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    indices: np.ndarray    # (N, k), ascending distance, self excluded
    distances: np.ndarray  # (N, k)

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True, eq=False)
class FieldDerivatives:
    jacobian: np.ndarray    # (N, 3, 3), J[n, a, b] = d v_a / d x_b
    laplacian: np.ndarray   # (N, 3)
    degenerate: np.ndarray  # (N,) bool, points whose local fit was rank deficient

    @property
    def n_degenerate(self) -> int:
        return int(self.degenerate.sum())


def knn(points, k: int) -> NeighborGraph:
    """Exact k nearest neighbors by brute force; ties go to the lower index."""
    P = np.asarray(points, dtype=np.float64)
    n = len(P)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    cols = np.arange(n)
    for lo in range(0, n, _CHUNK):
        block = P[lo:lo + _CHUNK]
        rows = np.arange(len(block))
        d2 = pairwise_sqdist(block, P)
        d2[rows, lo + rows] = np.inf
        thr = np.partition(d2, k - 1, axis=1)[:, k - 1]
        within = d2 <= thr[:, None]
        counts = within.sum(axis=1)
        plain = counts == k
        # rows without ties at the k-th distance: candidates are exactly the k nearest
        cand = np.nonzero(within[plain])[1].reshape(-1, k)
        cd = np.take_along_axis(d2[plain], cand, axis=1)
        order = np.argsort(cd, axis=1, kind="stable")
        idx[lo + rows[plain]] = np.take_along_axis(cand, order, axis=1)
        dist[lo + rows[plain]] = np.sqrt(np.take_along_axis(cd, order, axis=1))
        for r in rows[~plain]:
            sel = np.argsort(d2[r], kind="stable")[:k]
            idx[lo + r] = sel
            dist[lo + r] = np.sqrt(d2[r, sel])
    return NeighborGraph(idx, dist)


def _design(offsets: np.ndarray) -> np.ndarray:
    x, y, z = offsets[..., 0], offsets[..., 1], offsets[..., 2]
    return np.stack([x, y, z, 0.5 * x * x, 0.5 * y * y, 0.5 * z * z, x * y, x * z, y * z], axis=-1)


@dataclass(frozen=True, eq=False)
class MLSStencil:
    """Linear map from neighbor value differences to fitted coefficients.

    ``weights[n]`` is the 9 x k weighted pseudo-inverse of point n's local
    design matrix; coefficients are gradient * h and Hessian entries * h^2.
    """

    graph: NeighborGraph
    weights: np.ndarray     # (N, 9, k)
    h: np.ndarray           # (N,)
    degenerate: np.ndarray  # (N,)

    def apply(self, field) -> FieldDerivatives:
        V = as_values(field)
        if len(V) != len(self.h):
            raise ValueError("field is not aligned with the stencil")
        nb = self.graph.indices
        coef = np.einsum("nik,nka->nia", self.weights, V[nb] - V[:, None, :])
        h = self.h
        jac = np.transpose(coef[:, 0:3, :], (0, 2, 1)) / h[:, None, None]
        lap = coef[:, 3:6, :].sum(axis=1) / (h**2)[:, None]
        return FieldDerivatives(jac, lap, self.degenerate)


def mls_stencil(points, graph: NeighborGraph, rcond: float = 1e-10) -> MLSStencil:
    """Weighted quadratic least-squares stencil for every point of ``points``.

    Weights are Gaussian, exp(-|q - p|^2 / h^2) with h the mean neighbor
    distance at p. Neighborhoods whose scaled design matrix has condition
    number above 1/rcond are flagged and get an all-zero stencil.
    """
    P = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if len(graph.indices) != len(P):
        raise ValueError("graph is not aligned with points")
    if graph.k < MIN_K:
        raise ValueError(f"quadratic fits need k >= {MIN_K}, got {graph.k}")
    nb = graph.indices
    h = graph.distances.mean(axis=1)
    h = np.where(h > 0, h, 1.0)
    Y = (P[nb] - P[:, None, :]) / h[:, None, None]
    sw = np.exp(-0.5 * (graph.distances / h[:, None]) ** 2)
    U, S, Vt = np.linalg.svd(_design(Y) * sw[..., None], full_matrices=False)
    degenerate = S[:, -1] <= rcond * S[:, 0]
    inv = np.where(degenerate[:, None], 0.0, 1.0 / np.where(S > 0, S, 1.0))
    weights = np.einsum("nji,nj,nkj->nik", Vt, inv, U) * sw[:, None, :]
    return MLSStencil(graph, weights, h, degenerate)


def mls_derivatives(points, field, graph: NeighborGraph, rcond: float = 1e-10) -> FieldDerivatives:
    """Jacobian and Laplacian of ``field`` from weighted quadratic fits.

    Degenerate neighborhoods yield zero derivatives and are flagged in the
    result's ``degenerate`` mask.
    """
    V = as_values(field)
    if len(V) != len(graph.indices):
        raise ValueError("points, field and graph must be aligned")
    return mls_stencil(points, graph, rcond).apply(V)


def divergence(derivs: FieldDerivatives) -> np.ndarray:
    return np.trace(derivs.jacobian, axis1=1, axis2=2)


def convective_term(field, derivs: FieldDerivatives) -> np.ndarray:
    """(v . grad) v per point, i.e. J v."""
    return np.einsum("nab,nb->na", derivs.jacobian, as_values(field))


def shape_graph(shape: Shape, k: int = DEFAULT_K) -> NeighborGraph:
    """k-NN graph over the interior and wall points of ``shape``."""
    return shape_stencil(shape, k).graph


def shape_stencil(shape: Shape, k: int = DEFAULT_K) -> MLSStencil:
    """MLS stencil over the interior and wall points of ``shape``, cached per shape."""
    cache = _stencil_cache.setdefault(shape, {})
    if k not in cache:
        pts = shape.points[shape.graph_indices]
        cache[k] = mls_stencil(pts, knn(pts, k))
    return cache[k]


class Residuals(NamedTuple):
    continuity: float
    momentum: float


@dataclass(frozen=True, eq=False)
class ResidualFields:
    """Per-point residuals on the graph support plus the interior mask."""

    divergence: np.ndarray
    momentum: np.ndarray
    interior: np.ndarray
    n_degenerate: int

    def means(self) -> Residuals:
        return Residuals(float(np.mean(np.abs(self.divergence[self.interior]))),
                         float(np.mean(self.momentum[self.interior])))


def residual_fields(shape: Shape, field, constants: FluidConstants = FluidConstants(),
                    k: int = DEFAULT_K) -> ResidualFields:
    V = as_values(field)
    if len(V) != len(shape):
        raise ValueError(f"field has {len(V)} rows, shape {shape.id!r} has {len(shape)} points")
    sub = shape.graph_indices
    v = V[sub]
    d = shape_stencil(shape, k).apply(v)
    mom = constants.density * convective_term(v, d) - constants.viscosity * d.laplacian
    return ResidualFields(divergence(d), np.sqrt((mom**2).sum(axis=1)),
                          shape.roles[sub] == ROLE_INTERIOR, d.n_degenerate)


def ns_residuals(shape: Shape, field, constants: FluidConstants = FluidConstants(),
                 k: int = DEFAULT_K) -> Residuals:
    """Mean |div v| and mean |rho (v.grad)v - mu lap v| over interior points."""
    return residual_fields(shape, field, constants, k).means()
