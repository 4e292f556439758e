"""Dense small-matrix kernels: rank with tolerance and normal-space projections.

``proj_range_complement`` builds the orthogonal projection onto the
orthogonal complement of the range of an N x n matrix (equivalently, onto
the nullspace of its transpose).  ``reduced_nullspace_proj`` restricts that
projection to the directions that extend continuously into the nullspaces
of nearby matrices of a field: the numerically "reduced" normal space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

__all__ = [
    "ProjectionReport",
    "ball_sample_points",
    "proj_range_complement",
    "reduced_nullspace_proj",
]

DEFAULT_RANK_TOL = 1e-9


@dataclass
class ProjectionReport:
    """Orthogonal projection onto a subspace, with the rank decision that produced it."""

    projection: np.ndarray   # (N, N), symmetric idempotent
    rank_used: int           # rank of the input matrix at the decision tolerance
    tolerance_used: float    # absolute singular-value cutoff
    basis: np.ndarray        # (N, k) orthonormal columns spanning the projected subspace


def _nullspace_basis(A: np.ndarray, tol: float):
    """Orthonormal basis of N(A^T) = R(A)^perp and the rank decision."""
    A = np.asarray(A, dtype=float)
    N = A.shape[0]
    if not np.isfinite(A).all():
        raise ValueError("matrix has non-finite entries")
    U, s, _ = np.linalg.svd(A)
    smax = s[0] if s.size else 0.0
    cutoff = tol * smax
    rank = int(np.sum(s >= cutoff)) if smax > 0 else 0
    return U[:, rank:], rank, cutoff


def proj_range_complement(A: np.ndarray, tol: float = DEFAULT_RANK_TOL) -> ProjectionReport:
    """Projection onto the orthogonal complement of the range of A.

    Rank is decided by singular values >= tol * sigma_max; the zero matrix
    yields the identity projection.
    """
    basis, rank, cutoff = _nullspace_basis(A, tol)
    projection = basis @ basis.T
    return ProjectionReport(projection=projection, rank_used=rank, tolerance_used=cutoff, basis=basis)


def ball_sample_points(center: np.ndarray, eps: float, m: int) -> np.ndarray:
    """Deterministic low-discrepancy points in the closed ball B_eps(center), shape (m, dim)."""
    center = np.asarray(center, dtype=float)
    dim = center.shape[0]
    if dim == 1:
        # stratified symmetric offsets, never exactly the center
        u = (np.arange(m) + 0.5) / m
        offs = eps * (2.0 * u - 1.0)
        offs[np.abs(offs) < 1e-3 * eps] = 1e-3 * eps
        return center[None, :] + offs[:, None]
    sampler = qmc.Halton(d=dim, scramble=False)
    u = sampler.random(m)
    radius = eps * u[:, 0] ** (1.0 / dim)
    if dim == 2:
        theta = 2.0 * np.pi * u[:, 1]
        direction = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    else:
        # inverse-CDF on the sphere for the polar angle, uniform in azimuth (dim == 3)
        z = 2.0 * u[:, 1] - 1.0
        phi = 2.0 * np.pi * u[:, 2] if dim >= 3 else np.zeros(m)
        r_xy = np.sqrt(np.maximum(1.0 - z ** 2, 0.0))
        cols = [r_xy * np.cos(phi), r_xy * np.sin(phi), z]
        direction = np.stack(cols[:dim], axis=1)
        norm = np.linalg.norm(direction, axis=1, keepdims=True)
        direction = direction / np.where(norm == 0, 1.0, norm)
    return center[None, :] + radius[:, None] * direction


def reduced_nullspace_proj(
    V: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    eps: float,
    samples: Optional[int] = None,
    tol: float = DEFAULT_RANK_TOL,
    tol_angle: Optional[float] = None,
    sample_points: Optional[np.ndarray] = None,
) -> ProjectionReport:
    """Projection onto the reduced nullspace of V(x)^T.

    A direction xi in N(V(x)^T) belongs to the reduced nullspace when it
    admits a continuous normal extension into the nullspaces N(V(y)^T) for
    y near x.  Numerically we average the nullspace projectors Q_y over
    low-discrepancy samples y in B_eps(x) and keep the eigenvectors of the
    averaged operator (restricted to N(V(x)^T)) with eigenvalue
    >= 1 - tol_angle: directions almost preserved by every nearby projector
    are exactly the numerically extendable ones.

    This is a stated approximation.  The acceptance threshold defaults to
    ``tol_angle = 1e-6 * eps``; normal frames that rotate smoothly at rate
    omega are detected only while ``omega^2 * eps^2 <~ tol_angle``, so pass
    a larger ``tol_angle`` when probing coarse neighbourhoods of smoothly
    varying fields.  No finite sampling can certify C^1 extendability at a
    genuine rank discontinuity.
    """
    x = np.asarray(x, dtype=float)
    if tol_angle is None:
        tol_angle = 1e-6 * eps
    A = np.asarray(V(x), dtype=float)
    basis, rank, cutoff = _nullspace_basis(A, tol)
    N = A.shape[0]
    k = basis.shape[1]
    if k == 0:
        return ProjectionReport(np.zeros((N, N)), rank, cutoff, basis)
    if sample_points is None:
        m = samples
        if m is None:
            m = {1: 8, 2: 16}.get(x.shape[0], 32)
        if m < 8:
            raise ValueError("need at least 8 samples")
        sample_points = ball_sample_points(x, eps, m)
    else:
        sample_points = np.atleast_2d(np.asarray(sample_points, dtype=float))
        if sample_points.shape[0] == 0:
            raise ValueError("no sample points supplied")
    mean_q = np.zeros((k, k))
    for y in sample_points:
        Ay = np.asarray(V(y), dtype=float)
        if not np.isfinite(Ay).all():
            raise ValueError(f"field has non-finite entries at sample point {y}")
        by, _, _ = _nullspace_basis(Ay, tol)
        proj_y = by @ by.T
        mean_q += basis.T @ proj_y @ basis
    mean_q /= len(sample_points)
    mean_q = 0.5 * (mean_q + mean_q.T)
    evals, evecs = np.linalg.eigh(mean_q)
    keep = evals >= 1.0 - tol_angle
    W = basis @ evecs[:, keep]
    if W.shape[1]:
        W, _ = np.linalg.qr(W)
    projection = W @ W.T
    return ProjectionReport(projection=projection, rank_used=rank, tolerance_used=cutoff, basis=W)
