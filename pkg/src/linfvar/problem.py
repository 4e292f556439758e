"""Domains, grids, Hamiltonians and candidate maps with jet extraction.

Candidate maps u : box in R^n -> R^N come in two flavours: closed-form
(one expression per component, derivatives exact via second-order duals)
and grid-sampled (derivatives by second-order finite differences: central
stencils in the interior, one-sided second-order stencils at grid faces
and next to invalid nodes).  Grid maps evaluate only at nodes; no
interpolation is ever performed.

A :class:`Subdomain` is a closed node set over a parent box, with boundary
nodes (masked nodes adjacent to unmasked nodes or to a box face), an
interior, and a singular mask of nodes excluded from all evaluations.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .exprlang import Ast, SingularityError, eval_jet2, parse

__all__ = [
    "ClosedFormMap",
    "DomainBox",
    "GridMap",
    "HamiltonianJet",
    "Hamiltonian",
    "Jet2",
    "PerturbedMap",
    "Problem",
    "StencilError",
    "Subdomain",
    "axis_derivative",
    "hamiltonian_jet",
    "hamiltonian_value",
    "jets_at_nodes",
    "load_problem",
    "map_jet",
    "problem_digest",
    "read_grid_csv",
    "write_grid_csv",
]


class StencilError(ValueError):
    """A finite-difference stencil could not be placed (out of bounds / too many invalid nodes)."""


# ---------------------------------------------------------------------------
# Domain and subdomains


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box with a uniform tensor grid (>= 3 nodes per axis)."""

    lo: tuple
    hi: tuple
    resolution: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        res = np.asarray(self.resolution, dtype=int)
        if lo.shape != hi.shape or lo.shape != res.shape:
            raise ValueError("lo, hi, resolution must have equal lengths")
        if not np.all(lo < hi):
            raise ValueError("domain requires lo < hi componentwise")
        if not np.all(res >= 3):
            raise ValueError("resolution must be >= 3 nodes per axis")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))
        object.__setattr__(self, "resolution", tuple(int(v) for v in res))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple:
        return self.resolution

    @property
    def spacing(self) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        res = np.asarray(self.resolution)
        return (hi - lo) / (res - 1)

    def axis_coords(self, axis: int) -> np.ndarray:
        return np.linspace(self.lo[axis], self.hi[axis], self.resolution[axis])

    def all_nodes(self) -> np.ndarray:
        """All node multi-indices, lexicographic, shape (M, dim)."""
        idx = np.indices(self.shape).reshape(self.dim, -1).T
        return np.ascontiguousarray(idx)

    def node_coords(self, nodes: np.ndarray) -> np.ndarray:
        """Coordinates of integer multi-indices ``nodes`` (M, dim) -> (dim, M)."""
        nodes = np.atleast_2d(np.asarray(nodes, dtype=int))
        lo = np.asarray(self.lo)
        h = self.spacing
        return (lo[None, :] + nodes * h[None, :]).T

    def nearest_node(self, x: np.ndarray) -> tuple:
        """Multi-index of the node matching point ``x``; error if x is not a node."""
        x = np.asarray(x, dtype=float)
        h = self.spacing
        raw = (x - np.asarray(self.lo)) / h
        idx = np.rint(raw).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.shape)):
            raise ValueError(f"point {x} outside the grid")
        if np.any(np.abs(raw - idx) > 1e-9):
            raise ValueError(f"point {x} is not a grid node (grid maps evaluate only at nodes)")
        return tuple(int(i) for i in idx)


def _boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Masked nodes adjacent (along an axis) to unmasked nodes or to the grid faces."""
    boundary = np.zeros_like(mask)
    for axis in range(mask.ndim):
        lo_face = [slice(None)] * mask.ndim
        hi_face = [slice(None)] * mask.ndim
        lo_face[axis] = 0
        hi_face[axis] = -1
        boundary[tuple(lo_face)] |= mask[tuple(lo_face)]
        boundary[tuple(hi_face)] |= mask[tuple(hi_face)]
        fwd = [slice(None)] * mask.ndim
        bwd = [slice(None)] * mask.ndim
        fwd[axis] = slice(None, -1)
        bwd[axis] = slice(1, None)
        # neighbor outside the mask
        boundary[tuple(fwd)] |= mask[tuple(fwd)] & ~mask[tuple(bwd)]
        boundary[tuple(bwd)] |= mask[tuple(bwd)] & ~mask[tuple(fwd)]
    return boundary


@dataclass
class Subdomain:
    """Closed node set over a parent box, plus a geometric region for flow tests."""

    box: DomainBox
    mask: np.ndarray
    singular: np.ndarray
    region: tuple  # ("all",) | ("box", lo, hi) | ("ball", center, radius)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.singular = np.asarray(self.singular, dtype=bool)
        if self.mask.shape != self.box.shape or self.singular.shape != self.box.shape:
            raise ValueError("mask shapes must match the box resolution")
        if not self.mask.any():
            raise ValueError("empty subdomain")
        if not self.interior_mask.any():
            raise ValueError("subdomain has no interior nodes")

    @classmethod
    def whole(cls, box: DomainBox, singular: Optional[np.ndarray] = None) -> "Subdomain":
        sing = np.zeros(box.shape, dtype=bool) if singular is None else singular
        return cls(box, np.ones(box.shape, dtype=bool), sing, ("all",))

    @classmethod
    def from_box(cls, box: DomainBox, lo, hi, singular: Optional[np.ndarray] = None) -> "Subdomain":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        mask = np.ones(box.shape, dtype=bool)
        tol = 1e-9 * np.maximum(box.spacing, 1.0)
        for axis in range(box.dim):
            c = box.axis_coords(axis)
            keep = (c >= lo[axis] - tol[axis]) & (c <= hi[axis] + tol[axis])
            shape = [1] * box.dim
            shape[axis] = -1
            mask &= keep.reshape(shape)
        sing = np.zeros(box.shape, dtype=bool) if singular is None else singular
        return cls(box, mask, sing, ("box", tuple(float(v) for v in lo), tuple(float(v) for v in hi)))

    @classmethod
    def from_ball(cls, box: DomainBox, center, radius: float, singular: Optional[np.ndarray] = None) -> "Subdomain":
        center = np.asarray(center, dtype=float)
        nodes = box.all_nodes()
        coords = box.node_coords(nodes)  # (dim, M)
        inside = np.linalg.norm(coords - center[:, None], axis=0) <= radius + 1e-12
        mask = np.zeros(box.shape, dtype=bool)
        mask[tuple(nodes[inside].T)] = True
        sing = np.zeros(box.shape, dtype=bool) if singular is None else singular
        return cls(box, mask, sing, ("ball", tuple(float(v) for v in center), float(radius)))

    @property
    def boundary_mask(self) -> np.ndarray:
        return _boundary_mask(self.mask)

    @property
    def interior_mask(self) -> np.ndarray:
        return self.mask & ~self.boundary_mask

    @property
    def evaluable_mask(self) -> np.ndarray:
        return self.mask & ~self.singular

    def _nodes_of(self, m: np.ndarray) -> np.ndarray:
        return np.argwhere(m)  # lexicographic, deterministic

    def evaluable_nodes(self) -> np.ndarray:
        return self._nodes_of(self.evaluable_mask)

    def interior_nodes(self) -> np.ndarray:
        return self._nodes_of(self.interior_mask & ~self.singular)

    def boundary_nodes(self) -> np.ndarray:
        return self._nodes_of(self.boundary_mask & ~self.singular)

    def contains_point(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if self.region[0] == "all":
            lo, hi = np.asarray(self.box.lo), np.asarray(self.box.hi)
            return bool(np.all(x >= lo) and np.all(x <= hi))
        if self.region[0] == "box":
            lo, hi = np.asarray(self.region[1]), np.asarray(self.region[2])
            return bool(np.all(x >= lo) and np.all(x <= hi))
        center, radius = np.asarray(self.region[1]), self.region[2]
        return bool(np.linalg.norm(x - center) <= radius)


# ---------------------------------------------------------------------------
# Jets


@dataclass
class Jet2:
    """Second-order jet of a map at a point (batched when x has a trailing batch axis).

    ``value`` has shape (N,) + S, ``gradient`` (N, n) + S with entry [a, i]
    the i-th spatial partial of component a, ``hessian`` (N, n, n) + S
    (``None`` in first-order mode).
    """

    x: np.ndarray
    value: np.ndarray
    gradient: np.ndarray
    hessian: "np.ndarray | None"


# ---------------------------------------------------------------------------
# Finite-difference machinery (shared by grid maps and field divergences)


def _d1_stencil(M: int, i: int):
    if 0 < i < M - 1:
        return (i - 1, i, i + 1), (-0.5, 0.0, 0.5)
    if i == 0:
        return (0, 1, 2), (-1.5, 2.0, -0.5)
    return (M - 3, M - 2, M - 1), (0.5, -2.0, 1.5)


def _d2_stencil(M: int, i: int):
    if 0 < i < M - 1:
        return (i - 1, i, i + 1), (1.0, -2.0, 1.0)
    if M == 3:
        return (0, 1, 2), (1.0, -2.0, 1.0)
    if i == 0:
        return (0, 1, 2, 3), (2.0, -5.0, 4.0, -1.0)
    return (M - 4, M - 3, M - 2, M - 1), (-1.0, 4.0, -5.0, 2.0)


_FALLBACK_D1 = {
    "fwd": ((0, 1, 2), (-1.5, 2.0, -0.5)),
    "bwd": ((-2, -1, 0), (0.5, -2.0, 1.5)),
}
_FALLBACK_D2 = {
    "fwd": ((0, 1, 2, 3), (2.0, -5.0, 4.0, -1.0)),
    "bwd": ((-3, -2, -1, 0), (-1.0, 4.0, -5.0, 2.0)),
}


def axis_derivative(values: np.ndarray, axis: int, h: float, order: int = 1,
                    valid: Optional[np.ndarray] = None,
                    grid_ndim: Optional[int] = None) -> np.ndarray:
    """Second-order accurate derivative of a gridded field along ``axis``.

    ``values`` may carry leading component axes; the grid axes are the last
    ``grid_ndim`` (defaulting to ``valid.ndim``, else all axes).  Nodes whose
    default stencil touches an invalid node are recomputed with a shifted
    one-sided stencil where possible and set to NaN otherwise.
    """
    values = np.asarray(values, dtype=float)
    if grid_ndim is None:
        grid_ndim = values.ndim if valid is None else valid.ndim
    gaxis = values.ndim - grid_ndim + axis
    v = np.moveaxis(values, gaxis, -1)
    M = v.shape[-1]
    out = np.empty_like(v)
    if order == 1:
        out[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2 * h)
        out[..., 0] = (-1.5 * v[..., 0] + 2.0 * v[..., 1] - 0.5 * v[..., 2]) / h
        out[..., -1] = (1.5 * v[..., -1] - 2.0 * v[..., -2] + 0.5 * v[..., -3]) / h
    elif order == 2:
        out[..., 1:-1] = (v[..., 2:] - 2.0 * v[..., 1:-1] + v[..., :-2]) / h ** 2
        if M == 3:
            out[..., 0] = out[..., 1]
            out[..., -1] = out[..., 1]
        else:
            out[..., 0] = (2.0 * v[..., 0] - 5.0 * v[..., 1] + 4.0 * v[..., 2] - v[..., 3]) / h ** 2
            out[..., -1] = (2.0 * v[..., -1] - 5.0 * v[..., -2] + 4.0 * v[..., -3] - v[..., -4]) / h ** 2
    else:
        raise ValueError("order must be 1 or 2")
    result = np.moveaxis(out, -1, gaxis)
    if valid is not None and not valid.all():
        result = _fix_invalid(values, result, axis, h, order, valid, grid_ndim)
    return result


def _fix_invalid(values, result, axis, h, order, valid, grid_ndim):
    """Recompute nodes whose default stencil used an invalid node."""
    bad = ~valid
    polluted = bad.copy()
    for shift in range(1, 4):  # widest default stencil reaches 3 nodes
        polluted |= np.roll(bad, shift, axis=axis) | np.roll(bad, -shift, axis=axis)
    fallbacks = _FALLBACK_D1 if order == 1 else _FALLBACK_D2
    M = valid.shape[axis]
    lead = values.shape[: values.ndim - grid_ndim]

    def stencil_values(node, idxs, coeffs):
        acc = np.zeros(lead)
        for j, c in zip(idxs, coeffs):
            src = tuple(node[a] if a != axis else j for a in range(grid_ndim))
            acc = acc + c * values[(Ellipsis,) + src]
        return acc / (h if order == 1 else h ** 2)

    def all_valid(node, idxs):
        return all(
            0 <= j < M and valid[tuple(node[a] if a != axis else j for a in range(grid_ndim))]
            for j in idxs
        )

    for node in np.argwhere(polluted & valid):
        i = node[axis]
        offs, coeffs = (_d1_stencil if order == 1 else _d2_stencil)(M, i)
        chosen = (list(offs), coeffs) if all_valid(node, offs) else None
        if chosen is None:
            for kind in ("fwd", "bwd"):
                offs, coeffs = fallbacks[kind]
                idxs = [i + o for o in offs]
                if all_valid(node, idxs):
                    chosen = (idxs, coeffs)
                    break
        tgt = (Ellipsis,) + tuple(node)
        result[tgt] = stencil_values(node, *chosen) if chosen else np.nan
    for node in np.argwhere(bad):
        result[(Ellipsis,) + tuple(node)] = np.nan
    return result


# ---------------------------------------------------------------------------
# Map fields


class ClosedFormMap:
    """Map given by one expression per component; exact jets anywhere off its singular set."""

    def __init__(self, components: Sequence[Ast], n: Optional[int] = None):
        components = tuple(components)
        if not components:
            raise ValueError("a map needs at least one component")
        self.n = components[0].n if n is None else n
        self.N = len(components)
        for ast in components:
            bad = [v for v in ast.variables if not v.startswith("x")]
            if bad:
                raise ValueError(f"map expressions may only use x-variables, found {bad}")
        self.components = components

    @classmethod
    def from_expressions(cls, exprs: Sequence[str], n: int) -> "ClosedFormMap":
        return cls(tuple(parse(e, (n, 1)) for e in exprs), n=n)

    def jet2(self, x, order: int = 2, on_singularity: str = "raise") -> Jet2:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise ValueError(f"point has dimension {x.shape[0]}, map expects {self.n}")
        seeds = [f"x{i}" for i in range(1, self.n + 1)]
        binding = {seeds[i]: x[i] for i in range(self.n)}
        S = x.shape[1:]
        value = np.empty((self.N,) + S)
        gradient = np.empty((self.N, self.n) + S)
        hessian = np.empty((self.N, self.n, self.n) + S) if order >= 2 else None
        for a, ast in enumerate(self.components):
            d = eval_jet2(ast, binding, seeds, order=order, on_singularity=on_singularity)
            value[a] = d.val
            gradient[a] = d.grad
            if order >= 2:
                hessian[a] = d.hess
        return Jet2(x=x, value=value, gradient=gradient, hessian=hessian)

    def sample(self, box: DomainBox, on_singularity: str = "nan") -> "GridMap":
        nodes = box.all_nodes()
        coords = box.node_coords(nodes)
        jet = self.jet2(coords, order=1, on_singularity=on_singularity)
        values = jet.value.reshape((self.N,) + box.shape)
        return GridMap(box, values)


class GridMap:
    """Node-sampled map over a box; jets by finite differences, nodes only."""

    def __init__(self, box: DomainBox, values: np.ndarray, valid: Optional[np.ndarray] = None):
        values = np.asarray(values, dtype=float)
        if values.shape[1:] != box.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {box.shape}")
        self.box = box
        self.values = values
        self.N = values.shape[0]
        self.n = box.dim
        finite = np.isfinite(values).all(axis=0)
        self.valid = finite if valid is None else (np.asarray(valid, dtype=bool) & finite)
        self._du = None
        self._d2u = None

    def _derivatives(self):
        if self._du is None:
            h = self.box.spacing
            valid = None if self.valid.all() else self.valid
            nd = self.box.dim
            du = np.stack(
                [axis_derivative(self.values, i, h[i], order=1, valid=valid, grid_ndim=nd)
                 for i in range(self.n)],
                axis=1,
            )
            d2 = np.empty((self.N, self.n, self.n) + self.box.shape)
            for i in range(self.n):
                d2[:, i, i] = axis_derivative(self.values, i, h[i], order=2, valid=valid, grid_ndim=nd)
                for j in range(i + 1, self.n):
                    mixed = axis_derivative(du[:, i], j, h[j], order=1, valid=valid, grid_ndim=nd)
                    d2[:, i, j] = mixed
                    d2[:, j, i] = mixed
            self._du = du
            self._d2u = d2
        return self._du, self._d2u

    @property
    def jet_valid(self) -> np.ndarray:
        du, d2 = self._derivatives()
        ok = self.valid & np.isfinite(du).all(axis=(0, 1)) & np.isfinite(d2).all(axis=(0, 1, 2))
        return ok

    def jet_at_nodes(self, nodes: np.ndarray, order: int = 2) -> Jet2:
        nodes = np.atleast_2d(np.asarray(nodes, dtype=int))
        du, d2 = self._derivatives()
        sel = tuple(nodes.T)
        x = self.box.node_coords(nodes)
        value = self.values[(slice(None),) + sel]
        gradient = du[(slice(None), slice(None)) + sel]
        hessian = d2[(slice(None), slice(None), slice(None)) + sel] if order >= 2 else None
        return Jet2(x=x, value=value, gradient=gradient, hessian=hessian)

    def jet2(self, x, order: int = 2) -> Jet2:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            idx = self.box.nearest_node(x)
            if not self.valid[idx]:
                raise SingularityError(f"grid node {idx} is masked as singular/invalid")
            if not self.jet_valid[idx]:
                raise StencilError(f"no valid finite-difference stencil at node {idx}")
            jet = self.jet_at_nodes(np.asarray([idx]), order=order)
            return Jet2(
                x=x,
                value=jet.value[..., 0],
                gradient=jet.gradient[..., 0],
                hessian=None if jet.hessian is None else jet.hessian[..., 0],
            )
        nodes = np.asarray([self.box.nearest_node(p) for p in x.T], dtype=int)
        return self.jet_at_nodes(nodes, order=order)


class PerturbedMap:
    """Linear combination u + t*phi of two maps, jets added exactly."""

    def __init__(self, base, variation, scale: float = 1.0):
        if base.n != variation.n or base.N != variation.N:
            raise ValueError("maps must share dimensions")
        self.base = base
        self.variation = variation
        self.scale = float(scale)
        self.n = base.n
        self.N = base.N

    def jet2(self, x, order: int = 2, **kw) -> Jet2:
        j1 = map_jet(self.base, x, order=order)
        j2 = map_jet(self.variation, x, order=order)
        hess = None
        if order >= 2 and j1.hessian is not None and j2.hessian is not None:
            hess = j1.hessian + self.scale * j2.hessian
        return Jet2(
            x=j1.x,
            value=j1.value + self.scale * j2.value,
            gradient=j1.gradient + self.scale * j2.gradient,
            hessian=hess,
        )


MapField = Union[ClosedFormMap, GridMap, PerturbedMap]


def map_jet(u, x, order: int = 2) -> Jet2:
    """Second-order jet (value, gradient, hessian) of the map at a point or point batch."""
    return u.jet2(x, order=order)


def jets_at_nodes(u, box: DomainBox, nodes: np.ndarray, order: int = 2) -> Jet2:
    """Jets of a map at grid nodes of ``box`` (batch axis last)."""
    if isinstance(u, GridMap):
        if u.box != box:
            raise ValueError("grid map lives on a different box")
        return u.jet_at_nodes(nodes, order=order)
    if isinstance(u, PerturbedMap):
        j1 = jets_at_nodes(u.base, box, nodes, order=order)
        j2 = jets_at_nodes(u.variation, box, nodes, order=order)
        hess = None
        if order >= 2 and j1.hessian is not None and j2.hessian is not None:
            hess = j1.hessian + u.scale * j2.hessian
        return Jet2(j1.x, j1.value + u.scale * j2.value, j1.gradient + u.scale * j2.gradient, hess)
    coords = box.node_coords(np.atleast_2d(nodes))
    return u.jet2(coords, order=order)


# ---------------------------------------------------------------------------
# Hamiltonians


@dataclass
class HamiltonianJet:
    value: np.ndarray
    x_grad: np.ndarray    # (n,) + S
    eta_grad: np.ndarray  # (N,) + S
    P_grad: np.ndarray    # (N, n) + S


class Hamiltonian:
    """First-order density H(x, eta, P), closed-form or the built-in ``dirichlet`` = |P|^2."""

    def __init__(self, n: int, N: int, expr: Optional[Ast] = None, builtin: Optional[str] = None):
        if (expr is None) == (builtin is None):
            raise ValueError("provide exactly one of expr/builtin")
        if builtin is not None and builtin != "dirichlet":
            raise ValueError(f"unknown builtin Hamiltonian {builtin!r}")
        self.n = n
        self.N = N
        self.expr = expr
        self.builtin = builtin
        if expr is not None:
            self.depends_on_eta = expr.depends_on("eta") or expr.depends_on("u")
            self.depends_on_x = expr.depends_on("x")
        else:
            self.depends_on_eta = False
            self.depends_on_x = False
        self._seeds = None

    @classmethod
    def dirichlet(cls, n: int, N: int) -> "Hamiltonian":
        return cls(n, N, builtin="dirichlet")

    @classmethod
    def from_expression(cls, src: str, n: int, N: int) -> "Hamiltonian":
        return cls(n, N, expr=parse(src, (n, N)))

    def _binding(self, x, eta, P):
        b = {}
        for i in range(self.n):
            b[f"x{i+1}"] = x[i]
        for a in range(self.N):
            b[f"eta{a+1}"] = eta[a]
            b[f"u{a+1}"] = eta[a]  # u-variables alias the value slot
        for a in range(self.N):
            for i in range(self.n):
                b[f"P{a+1}{i+1}"] = P[a, i]
        return b

    def seeds(self):
        if self._seeds is None:
            self._seeds = (
                [f"x{i}" for i in range(1, self.n + 1)]
                + [f"eta{a}" for a in range(1, self.N + 1)]
                + [f"P{a}{i}" for a in range(1, self.N + 1) for i in range(1, self.n + 1)]
            )
        return self._seeds


def hamiltonian_value(H: Hamiltonian, x, eta, P) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    P = np.asarray(P, dtype=float)
    if H.builtin == "dirichlet":
        return np.sum(P * P, axis=(0, 1))
    d = eval_jet2(H.expr, H._binding(x, eta, P), seeds=(), order=1)
    return d.val


def hamiltonian_jet(H: Hamiltonian, x, eta, P) -> HamiltonianJet:
    """Value and the first-derivative bundle (H_x, H_eta, H_P); exact for builtins and expressions."""
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    P = np.asarray(P, dtype=float)
    S = P.shape[2:]
    if H.builtin == "dirichlet":
        return HamiltonianJet(
            value=np.sum(P * P, axis=(0, 1)),
            x_grad=np.zeros((H.n,) + S),
            eta_grad=np.zeros((H.N,) + S),
            P_grad=2.0 * P,
        )
    seeds = H.seeds()
    d = eval_jet2(H.expr, H._binding(x, eta, P), seeds, order=1)
    n, N = H.n, H.N
    return HamiltonianJet(
        value=d.val,
        x_grad=d.grad[:n],
        eta_grad=d.grad[n:n + N],
        P_grad=d.grad[n + N:].reshape((N, n) + S),
    )


# ---------------------------------------------------------------------------
# Problem file I/O


@dataclass
class Problem:
    n: int
    N: int
    box: DomainBox
    H: Hamiltonian
    u: MapField
    subdomain: Subdomain
    raw: dict = field(default_factory=dict, repr=False)


def _singular_mask_from_spec(box: DomainBox, spec) -> np.ndarray:
    mask = np.zeros(box.shape, dtype=bool)
    for item in spec or []:
        axis = int(item["axis"])
        value = float(item["value"])
        c = box.axis_coords(axis)
        hit = np.abs(c - value) <= 1e-9 * max(1.0, box.spacing[axis])
        shape = [1] * box.dim
        shape[axis] = -1
        mask |= hit.reshape(shape)
    return mask


def prescan_singularities(u, box: DomainBox) -> np.ndarray:
    """Nodes where jet extraction fails; used to auto-augment the singular mask."""
    if isinstance(u, GridMap):
        return ~u.jet_valid
    nodes = box.all_nodes()
    coords = box.node_coords(nodes)
    jet = u.jet2(coords, order=2, on_singularity="nan")
    ok = (
        np.isfinite(jet.value).all(axis=0)
        & np.isfinite(jet.gradient).all(axis=(0, 1))
        & np.isfinite(jet.hessian).all(axis=(0, 1, 2))
    )
    bad = np.zeros(box.shape, dtype=bool)
    bad[tuple(nodes[~ok].T)] = True
    return bad


def load_problem(source: Union[str, Path, dict]) -> Problem:
    """Load a problem file (JSON) and build the domain, Hamiltonian, map and subdomain.

    Schema::

        { "n": int, "N": int,
          "domain": {"lo": [...], "hi": [...], "resolution": [...]},
          "H": "<expr>" | "dirichlet",
          "u": ["<expr>", ...] | {"grid": "<path to CSV>"},
          "subdomain": {"lo": [...], "hi": [...]},          # optional
          "singular": [{"axis": i, "value": v}, ...] }       # optional

    Declared singular sets are augmented by a pre-scan that catches
    singularity errors at grid nodes, so no NaN ever enters an evaluation
    silently.
    """
    if isinstance(source, dict):
        data = source
        base = Path(".")
    else:
        path = Path(source)
        data = json.loads(path.read_text())
        base = path.parent

    def field_of(obj, key, path_txt):
        if key not in obj:
            raise ValueError(f"problem file missing field {path_txt!r}")
        return obj[key]

    n = int(field_of(data, "n", "n"))
    N = int(field_of(data, "N", "N"))
    dom = field_of(data, "domain", "domain")
    box = DomainBox(
        tuple(field_of(dom, "lo", "domain.lo")),
        tuple(field_of(dom, "hi", "domain.hi")),
        tuple(field_of(dom, "resolution", "domain.resolution")),
    )
    hspec = field_of(data, "H", "H")
    H = Hamiltonian.dirichlet(n, N) if hspec == "dirichlet" else Hamiltonian.from_expression(hspec, n, N)
    uspec = field_of(data, "u", "u")
    if isinstance(uspec, dict):
        u = read_grid_csv(base / field_of(uspec, "grid", "u.grid"), box, N)
    else:
        if len(uspec) != N:
            raise ValueError(f"u must have {N} components, got {len(uspec)}")
        u = ClosedFormMap.from_expressions(uspec, n)
    singular = _singular_mask_from_spec(box, data.get("singular"))
    singular |= prescan_singularities(u, box)
    sub = data.get("subdomain")
    if sub is None:
        subdomain = Subdomain.whole(box, singular)
    else:
        subdomain = Subdomain.from_box(box, sub["lo"], sub["hi"], singular)
    return Problem(n=n, N=N, box=box, H=H, u=u, subdomain=subdomain, raw=data)


def problem_digest(data: dict) -> str:
    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def read_grid_csv(path, box: DomainBox, N: int) -> GridMap:
    """Grid CSV: one row per node, columns = node multi-index then u components."""
    values = np.full((N,) + box.shape, np.nan)
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            idx = tuple(int(float(c)) for c in row[: box.dim])
            comps = [float(c) for c in row[box.dim:]]
            if len(comps) != N:
                raise ValueError(f"row for node {idx} has {len(comps)} components, expected {N}")
            for a in range(N):
                values[(a,) + idx] = comps[a]
    return GridMap(box, values)


def write_grid_csv(path, grid: GridMap) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for node in grid.box.all_nodes():
            idx = tuple(int(i) for i in node)
            writer.writerow(list(idx) + [repr(float(grid.values[(a,) + idx])) for a in range(grid.N)])
