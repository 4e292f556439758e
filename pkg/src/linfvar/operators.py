"""Pointwise residuals of the second-order PDE operators of the theory.

The central object is the Hamiltonian-form critical-point system for the
supremal energy: a tangential part

    H_P(., u, Du) D(H(., u, Du))

living in the range of H_P, plus a normal part

    H(., u, Du) * Proj (Div(H_P(., u, Du)) - H_eta(., u, Du))

where Proj projects onto the orthogonal complement of the range of H_P
(variant "full") or onto the reduced normal space of extendable directions
(variant "reduced").  The two parts are orthogonal by construction, so the
system splits into two independent operators; both are exposed.

Div(H_P) differentiates the composed matrix field x -> H_P(x, u(x), Du(x))
numerically (central differences of step h_div for closed-form maps, grid
stencils for node-sampled maps), which only needs first derivatives of H
and second-order jets of u.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import linalg
from .problem import (
    GridMap,
    Hamiltonian,
    PerturbedMap,
    Subdomain,
    axis_derivative,
    hamiltonian_jet,
    map_jet,
)

__all__ = [
    "AronssonResidual",
    "ResidualField",
    "aronsson_residual",
    "composite_gradient",
    "infinity_laplacian_residual",
    "residual_field",
    "split_residuals",
]


@dataclass
class AronssonResidual:
    """Tangential/normal split of the critical-point system at one point."""

    tangential: np.ndarray     # (N,), in range(H_P)
    normal: np.ndarray         # (N,), orthogonal to range(H_P)
    variant: str               # "full" | "reduced"
    rank_used: int             # rank of H_P at the point
    reduced_dim: int           # dimension of the projected normal space
    projection_drop: bool      # reduced space strictly smaller than the plain normal space

    @property
    def total(self) -> np.ndarray:
        return self.tangential + self.normal

    @property
    def tangential_norm(self) -> float:
        return float(np.linalg.norm(self.tangential))

    @property
    def normal_norm(self) -> float:
        return float(np.linalg.norm(self.normal))

    @property
    def total_norm(self) -> float:
        return float(np.linalg.norm(self.total))


def composite_gradient(u, H: Hamiltonian, x) -> np.ndarray:
    """Spatial gradient of x -> H(x, u(x), Du(x)) by the chain rule (uses D2u)."""
    jet = map_jet(u, np.asarray(x, dtype=float), order=2)
    return _composite_gradient_from_jets(H, jet)


def _composite_gradient_from_jets(H: Hamiltonian, jet) -> np.ndarray:
    ham = hamiltonian_jet(H, jet.x, jet.value, jet.gradient)
    # component i: H_xi + H_eta . D_i u + H_P : D_i Du
    g = ham.x_grad + np.einsum("a...,ai...->i...", ham.eta_grad, jet.gradient)
    g = g + np.einsum("aj...,aji...->i...", ham.P_grad, jet.hessian)
    return np.asarray(g, dtype=float)


def _hp_field_sampler(u, H: Hamiltonian):
    def sample(y):
        jet = map_jet(u, np.asarray(y, dtype=float), order=1)
        return hamiltonian_jet(H, jet.x, jet.value, jet.gradient).P_grad
    return sample


def _divergence_closed_form(u, H: Hamiltonian, x: np.ndarray, h_div: float) -> np.ndarray:
    """(Div F)_a = sum_i d_i F_{ai} for F(y) = H_P(y, u(y), Du(y)), central differences."""
    n = x.shape[0]
    offsets = np.zeros((n, 2 * n))
    for i in range(n):
        offsets[i, 2 * i] = h_div
        offsets[i, 2 * i + 1] = -h_div
    pts = x[:, None] + offsets
    jets = map_jet(u, pts, order=1)
    hp = hamiltonian_jet(H, jets.x, jets.value, jets.gradient).P_grad  # (N, n, 2n)
    div = np.zeros(hp.shape[0])
    for i in range(n):
        div += (hp[:, i, 2 * i] - hp[:, i, 2 * i + 1]) / (2.0 * h_div)
    return div


def _grid_hp_field(u: GridMap, H: Hamiltonian):
    nodes = u.box.all_nodes()
    jets = u.jet_at_nodes(nodes, order=1)
    ham = hamiltonian_jet(H, jets.x, jets.value, jets.gradient)
    hp = ham.P_grad.reshape((u.N, u.n) + u.box.shape)
    return hp


def _grid_divergence_field(u: GridMap, H: Hamiltonian) -> np.ndarray:
    hp = _grid_hp_field(u, H)
    h = u.box.spacing
    valid = None if u.jet_valid.all() else u.jet_valid
    div = np.zeros((u.N,) + u.box.shape)
    for i in range(u.n):
        div += axis_derivative(hp[:, i], i, h[i], order=1, valid=valid, grid_ndim=u.n)
    return div


def _default_eps(u, x: np.ndarray) -> float:
    if isinstance(u, GridMap):
        return 2.0 * float(np.max(u.box.spacing))
    if isinstance(u, PerturbedMap):
        return _default_eps(u.base, x)
    return 1e-2 * (1.0 + float(np.linalg.norm(x)))


def _normal_projection(u, H, x, hp, variant, eps, samples, rank_tol, tol_angle):
    if variant == "full":
        return linalg.proj_range_complement(hp, tol=rank_tol), None
    full = linalg.proj_range_complement(hp, tol=rank_tol)
    if full.basis.shape[1] == 0:
        # full rank at the point: nothing can extend, skip the sampling
        return full, full
    if eps is None:
        eps = _default_eps(u, x)
    sample_points = None
    if isinstance(u, GridMap):
        nodes = u.box.all_nodes()
        coords = u.box.node_coords(nodes).T
        dist = np.linalg.norm(coords - x[None, :], axis=1)
        near = (dist <= eps) & (dist > 1e-12) & u.jet_valid[tuple(nodes.T)]
        if not near.any():
            raise ValueError(f"no valid grid nodes inside the eps-ball around {x}")
        sample_points = coords[near]
    reduced = linalg.reduced_nullspace_proj(
        _hp_field_sampler(u, H), x, eps=eps, samples=samples,
        tol=rank_tol, tol_angle=tol_angle, sample_points=sample_points,
    )
    return reduced, full


def aronsson_residual(
    u,
    H: Hamiltonian,
    x,
    variant: str = "reduced",
    eps: Optional[float] = None,
    samples: Optional[int] = None,
    h_div: Optional[float] = None,
    rank_tol: float = linalg.DEFAULT_RANK_TOL,
    tol_angle: Optional[float] = None,
) -> AronssonResidual:
    """Tangential + normal residual of the critical-point system at a point."""
    if variant not in ("full", "reduced"):
        raise ValueError("variant must be 'full' or 'reduced'")
    x = np.asarray(x, dtype=float)
    jet = map_jet(u, x, order=2)
    ham = hamiltonian_jet(H, jet.x, jet.value, jet.gradient)
    dH = _composite_gradient_from_jets(H, jet)
    tangential = ham.P_grad @ dH
    if isinstance(u, GridMap):
        idx = u.box.nearest_node(x)
        div = _grid_divergence_field(u, H)[(slice(None),) + idx]
    else:
        if h_div is None:
            h_div = 1e-5 * (1.0 + float(np.linalg.norm(x)))
        div = _divergence_closed_form(u, H, x, h_div)
    proj, full = _normal_projection(u, H, x, ham.P_grad, variant, eps, samples, rank_tol, tol_angle)
    normal = float(ham.value) * (proj.projection @ (div - ham.eta_grad))
    reduced_dim = proj.basis.shape[1]
    drop = False
    if variant == "reduced" and full is not None:
        drop = reduced_dim < full.basis.shape[1]
    return AronssonResidual(
        tangential=np.asarray(tangential, dtype=float),
        normal=np.asarray(normal, dtype=float),
        variant=variant,
        rank_used=proj.rank_used,
        reduced_dim=reduced_dim,
        projection_drop=drop,
    )


def split_residuals(u, H: Hamiltonian, x, variant: str = "reduced", **kw):
    """The two independent systems separately: (tangential part, normal part)."""
    res = aronsson_residual(u, H, x, variant=variant, **kw)
    return res.tangential, res.normal


def infinity_laplacian_residual(
    u,
    x,
    reduced: bool = False,
    eps: Optional[float] = None,
    samples: Optional[int] = None,
    rank_tol: float = linalg.DEFAULT_RANK_TOL,
    tol_angle: Optional[float] = None,
) -> np.ndarray:
    """Residual Du D(|Du|^2) + |Du|^2 [Du]^perp (Laplacian u) at a point.

    With ``reduced=True`` the plain normal projection is replaced by the
    reduced one.  This is the quadratic-density special case of
    :func:`aronsson_residual` up to an overall factor 2.
    """
    x = np.asarray(x, dtype=float)
    jet = map_jet(u, x, order=2)
    Du = jet.gradient
    # D_i |Du|^2 = 2 sum_{a,j} Du[a,j] D_i D_j u_a
    dsq = 2.0 * np.einsum("aj,aji->i", Du, jet.hessian)
    lap = np.einsum("aii->a", jet.hessian)
    density = float(np.sum(Du * Du))
    if reduced:
        if eps is None:
            eps = _default_eps(u, x)
        sample_points = None
        if isinstance(u, GridMap):
            nodes = u.box.all_nodes()
            coords = u.box.node_coords(nodes).T
            dist = np.linalg.norm(coords - x[None, :], axis=1)
            near = (dist <= eps) & (dist > 1e-12) & u.jet_valid[tuple(nodes.T)]
            sample_points = coords[near]

        def field(y):
            return map_jet(u, np.asarray(y, dtype=float), order=1).gradient

        proj = linalg.reduced_nullspace_proj(
            field, x, eps=eps, samples=samples, tol=rank_tol,
            tol_angle=tol_angle, sample_points=sample_points,
        )
    else:
        proj = linalg.proj_range_complement(Du, tol=rank_tol)
    return Du @ dsq + density * (proj.projection @ lap)


# ---------------------------------------------------------------------------
# Batched residual evaluation over node sets / point lists


@dataclass
class ResidualField:
    points: np.ndarray         # (M, n) coordinates
    nodes: "np.ndarray | None"  # (M, n) int multi-indices when grid-based
    tangential: np.ndarray     # (N, M)
    normal: np.ndarray         # (N, M)
    variant: str
    drop_flags: np.ndarray     # (M,) projection-drop flags

    @property
    def total(self) -> np.ndarray:
        return self.tangential + self.normal

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.total, axis=0)


def residual_field(
    u,
    H: Hamiltonian,
    O: Subdomain,
    variant: str = "reduced",
    points: Optional[np.ndarray] = None,
    nodes: Optional[np.ndarray] = None,
    interior_only: bool = True,
    h_div: Optional[float] = None,
    eps: Optional[float] = None,
    samples: Optional[int] = None,
    rank_tol: float = linalg.DEFAULT_RANK_TOL,
    tol_angle: Optional[float] = None,
) -> ResidualField:
    """Residuals over a node set (grid maps) or arbitrary point list (closed-form maps).

    The tangential part and divergence are evaluated in one vectorised
    pass; normal projections use a batched SVD, falling back to per-point
    reduced projections only where the plain normal space is nontrivial.
    """
    if isinstance(u, GridMap):
        if nodes is None:
            if points is not None:
                # grid maps evaluate at nodes only: explicit points must be nodes
                nodes = np.asarray(
                    [u.box.nearest_node(p) for p in np.atleast_2d(np.asarray(points, dtype=float))],
                    dtype=int)
            else:
                nodes = O.interior_nodes() if interior_only else O.evaluable_nodes()
        nodes = np.atleast_2d(np.asarray(nodes, dtype=int))
        jets = u.jet_at_nodes(nodes, order=2)
        ham = hamiltonian_jet(H, jets.x, jets.value, jets.gradient)
        dH = _composite_gradient_from_jets(H, jets)
        div_all = _grid_divergence_field(u, H)
        div = div_all[(slice(None),) + tuple(nodes.T)]
        pts = jets.x.T
    else:
        if points is None:
            if nodes is None:
                nodes = O.interior_nodes() if interior_only else O.evaluable_nodes()
            points = O.box.node_coords(np.atleast_2d(nodes)).T
        points = np.atleast_2d(np.asarray(points, dtype=float))
        jets = map_jet(u, points.T, order=2)
        ham = hamiltonian_jet(H, jets.x, jets.value, jets.gradient)
        dH = _composite_gradient_from_jets(H, jets)
        n = points.shape[1]
        div = np.zeros((u.N, points.shape[0]))
        step = h_div
        for i in range(n):
            hh = (1e-5 * (1.0 + np.linalg.norm(points, axis=1))) if step is None else np.full(points.shape[0], step)
            plus = points.copy()
            minus = points.copy()
            plus[:, i] += hh
            minus[:, i] -= hh
            jp = map_jet(u, plus.T, order=1)
            jm = map_jet(u, minus.T, order=1)
            hp_p = hamiltonian_jet(H, jp.x, jp.value, jp.gradient).P_grad
            hp_m = hamiltonian_jet(H, jm.x, jm.value, jm.gradient).P_grad
            div += (hp_p[:, i] - hp_m[:, i]) / (2.0 * hh)
        pts = points
    tangential = np.einsum("ai...,i...->a...", ham.P_grad, dH)
    M = pts.shape[0]
    N = u.N
    normal = np.zeros((N, M))
    drop_flags = np.zeros(M, dtype=bool)
    rhs = div - ham.eta_grad
    hp_batch = np.moveaxis(ham.P_grad, -1, 0)  # (M, N, n)
    U, s, _ = np.linalg.svd(hp_batch)
    smax = s[:, 0] if s.shape[1] else np.zeros(M)
    ranks = np.sum(s >= rank_tol * np.maximum(smax, 1e-300)[:, None], axis=1)
    ranks = np.where(smax > 0, ranks, 0)
    full_rank = ranks >= N
    value = np.asarray(ham.value, dtype=float)
    for m in range(M):
        if full_rank[m]:
            continue  # normal space trivial, projection is zero
        if variant == "full":
            B = U[m][:, ranks[m]:]
            proj = B @ B.T
        else:
            res = aronsson_residual(
                u, H, pts[m], variant="reduced", eps=eps, samples=samples,
                h_div=h_div, rank_tol=rank_tol, tol_angle=tol_angle,
            )
            normal[:, m] = res.normal
            drop_flags[m] = res.projection_drop
            continue
        normal[:, m] = value[m] * (proj @ rhs[:, m])
    return ResidualField(
        points=pts,
        nodes=None if not isinstance(u, GridMap) else nodes,
        tangential=np.asarray(tangential, dtype=float).reshape(N, M),
        normal=normal,
        variant=variant,
        drop_flags=drop_flags,
    )
