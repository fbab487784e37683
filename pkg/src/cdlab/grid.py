"""Space-time grid on Q = (0, T) x (0, 1)^n, boundary bookkeeping and discrete norms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "SpaceTimeGrid",
    "BoundaryPartition",
    "build_grid",
    "partition_boundary",
    "discrete_norm",
    "trapezoid_weights",
    "export_partition_csv",
]


def trapezoid_weights(num: int, h: float) -> np.ndarray:
    w = np.full(num, h)
    w[0] = w[-1] = 0.5 * h
    return w


class SpaceTimeGrid:
    """Uniform tensor grid on Q = (0, T) x (0, 1)^n.

    Time levels are ``t_k = k * ht`` for ``k = 0..Nt`` and every spatial axis
    carries ``Nx`` nodes including both end points. Grid functions on Q are
    arrays of shape ``(Nt + 1, Nx, ..., Nx)``; boundary grid functions are
    arrays of shape ``(Nt + 1, nb)`` ordered like :attr:`boundary_nodes`.

    Every boundary node gets one outward normal. Nodes lying on more than one
    face (corners, edges) take the normal of the face with the smallest face
    id and are flagged in :attr:`is_corner`. Face id ``2 * axis + side``
    denotes ``{x_axis = side}``.
    """

    def __init__(self, n: int, Nx: int, Nt: int, T: float):
        self.n = int(n)
        self.Nx = int(Nx)
        self.Nt = int(Nt)
        self.T = float(T)
        self.hx = 1.0 / (self.Nx - 1)
        self.ht = self.T / self.Nt
        self.x = np.linspace(0.0, 1.0, self.Nx)
        self.t = np.linspace(0.0, self.T, self.Nt + 1)
        self.shape = (self.Nx,) * self.n
        self.size = self.Nx**self.n
        self._build_boundary()
        for name in ("x", "t", "boundary_nodes", "face", "normals", "is_corner", "interior_nodes"):
            getattr(self, name).setflags(write=False)

    def __repr__(self) -> str:
        return f"SpaceTimeGrid(n={self.n}, Nx={self.Nx}, Nt={self.Nt}, T={self.T})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpaceTimeGrid):
            return NotImplemented
        return (self.n, self.Nx, self.Nt, self.T) == (other.n, other.Nx, other.Nt, other.T)

    def __hash__(self) -> int:
        return hash((self.n, self.Nx, self.Nt, self.T))

    @property
    def diam(self) -> float:
        return math.sqrt(self.n)

    def _build_boundary(self):
        idx = np.indices(self.shape).reshape(self.n, -1)
        last = self.Nx - 1
        on_face = np.zeros((2 * self.n, self.size), dtype=bool)
        for axis in range(self.n):
            on_face[2 * axis] = idx[axis] == 0
            on_face[2 * axis + 1] = idx[axis] == last
        nface = on_face.sum(axis=0)
        bnodes = np.flatnonzero(nface > 0)
        self.boundary_nodes = bnodes
        self.interior_nodes = np.flatnonzero(nface == 0)
        self.face = np.argmax(on_face[:, bnodes], axis=0)
        self.is_corner = nface[bnodes] > 1
        normals = np.zeros((bnodes.size, self.n))
        axis = self.face // 2
        normals[np.arange(bnodes.size), axis] = np.where(self.face % 2 == 1, 1.0, -1.0)
        self.normals = normals
        self._on_face = on_face[:, bnodes]

    @cached_property
    def mesh(self) -> tuple[np.ndarray, ...]:
        """Spatial coordinate arrays, each of shape ``self.shape``."""
        return tuple(np.meshgrid(*([self.x] * self.n), indexing="ij"))

    @cached_property
    def boundary_coords(self) -> np.ndarray:
        """Coordinates of boundary nodes, shape ``(nb, n)``."""
        return np.stack([m.ravel()[self.boundary_nodes] for m in self.mesh], axis=-1)

    @cached_property
    def surface_weights(self) -> np.ndarray:
        """Trapezoid surface-measure weights on the boundary (corners shared by faces)."""
        w1 = trapezoid_weights(self.Nx, self.hx)
        idx = np.indices(self.shape).reshape(self.n, -1)[:, self.boundary_nodes]
        weights = np.zeros(self.boundary_nodes.size)
        for f in range(2 * self.n):
            axis = f // 2
            sel = self._on_face[f]
            wf = np.ones(sel.sum())
            for other in range(self.n):
                if other != axis:
                    wf *= w1[idx[other, sel]]
            weights[sel] += wf
        return weights

    @cached_property
    def trace_weights(self) -> np.ndarray:
        """Surface weights with corner/edge nodes dropped (used for Neumann-trace quadrature)."""
        w = np.zeros(self.boundary_nodes.size)
        w1 = trapezoid_weights(self.Nx, self.hx)
        idx = np.indices(self.shape).reshape(self.n, -1)[:, self.boundary_nodes]
        for b in np.flatnonzero(~self.is_corner):
            axis = self.face[b] // 2
            w[b] = np.prod([w1[idx[o, b]] for o in range(self.n) if o != axis])
        return w

    @cached_property
    def normal_stencil(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat indices of the two inward neighbours along the normal of each boundary node."""
        idx = np.indices(self.shape).reshape(self.n, -1)[:, self.boundary_nodes].copy()
        axis = self.face // 2
        step = np.where(self.face % 2 == 1, -1, 1)
        i1, i2 = idx.copy(), idx.copy()
        cols = np.arange(idx.shape[1])
        i1[axis, cols] += step
        i2[axis, cols] += 2 * step
        return (np.ravel_multi_index(tuple(i1), self.shape), np.ravel_multi_index(tuple(i2), self.shape))

    @cached_property
    def time_weights(self) -> np.ndarray:
        return trapezoid_weights(self.Nt + 1, self.ht)

    @cached_property
    def space_weights(self) -> np.ndarray:
        w1 = trapezoid_weights(self.Nx, self.hx)
        w = w1
        for _ in range(self.n - 1):
            w = np.multiply.outer(w, w1)
        return w

    def boundary_values(self, field: np.ndarray) -> np.ndarray:
        """Restrict a grid function on Q to the lateral boundary."""
        flat = np.asarray(field).reshape(field.shape[0], self.size, *field.shape[1 + self.n :])
        return flat[:, self.boundary_nodes]

    def inner_Q(self, u: np.ndarray, v: np.ndarray) -> complex:
        """Trapezoid quadrature of ``u * conj(v)`` over Q."""
        w = self.time_weights.reshape((-1,) + (1,) * self.n) * self.space_weights
        return np.sum(w * u * np.conj(v))

    def inner_Sigma(self, f: np.ndarray, g: np.ndarray, weights: np.ndarray | None = None) -> complex:
        w = self.surface_weights if weights is None else weights
        return np.sum(self.time_weights[:, None] * w[None, :] * f * np.conj(g))


@dataclass(frozen=True)
class BoundaryPartition:
    """Split of the boundary nodes by the sign of ``nu . omega0 - eps / 2``.

    ``plus_mask`` marks ``nu . omega0 > eps / 2``; ``minus_mask`` is its
    complement, so ties go to the measured (minus) side.
    """

    omega0: np.ndarray
    eps: float
    plus_mask: np.ndarray
    minus_mask: np.ndarray

    @property
    def plus_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.plus_mask)

    @property
    def minus_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.minus_mask)

    def measured_weights(self, grid: SpaceTimeGrid) -> np.ndarray:
        """Trace quadrature weights restricted to Sigma_{-, eps/2}(omega0)."""
        return np.where(self.minus_mask, grid.trace_weights, 0.0)


def build_grid(n: int, Nx: int, Nt: int, T: float) -> SpaceTimeGrid:
    if n < 2:
        raise ValueError(f"spatial dimension must be >= 2, got {n}")
    if Nx < 3 or Nt < 2:
        raise ValueError(f"need Nx >= 3 and Nt >= 2, got Nx={Nx}, Nt={Nt}")
    if not T > 0:
        raise ValueError(f"final time must be positive, got {T}")
    if T <= math.sqrt(n):
        raise ValueError(f"T={T} must exceed diam(Omega)=sqrt({n})={math.sqrt(n):.6f}")
    return SpaceTimeGrid(n, Nx, Nt, T)


def _unit(omega, n: int, tol: float = 1e-12) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if omega.size != n:
        raise ValueError(f"direction has {omega.size} components, expected {n}")
    if abs(np.linalg.norm(omega) - 1.0) > tol:
        raise ValueError(f"direction must be a unit vector, |omega|={np.linalg.norm(omega)}")
    return omega


def partition_boundary(grid: SpaceTimeGrid, omega0, eps: float) -> BoundaryPartition:
    omega0 = _unit(omega0, grid.n)
    if not 0.0 < eps < 2.0:
        raise ValueError(f"eps must lie in (0, 2), got {eps}")
    dot = grid.normals @ omega0
    plus = dot > 0.5 * eps
    plus.setflags(write=False)
    minus = ~plus
    minus.setflags(write=False)
    return BoundaryPartition(omega0=omega0, eps=float(eps), plus_mask=plus, minus_mask=minus)


def discrete_norm(field, grid: SpaceTimeGrid, kind: str = "L2_Q") -> float:
    """Discrete norms of grid functions (trapezoid rule in every axis).

    kind is one of ``L2_Q``, ``H1_Q`` (L2 in time, H1 in space), ``L2_Sigma``
    and ``Linf``. ``L2_Sigma`` expects a boundary grid function.
    """
    field = np.asarray(field)
    if kind == "Linf":
        return float(np.max(np.abs(field))) if field.size else 0.0
    if kind == "L2_Sigma":
        expected = (grid.Nt + 1, grid.boundary_nodes.size)
        if field.shape != expected:
            raise ValueError(f"boundary field has shape {field.shape}, expected {expected}")
        return float(np.sqrt(np.real(grid.inner_Sigma(field, field))))
    expected = (grid.Nt + 1,) + grid.shape
    if field.shape != expected:
        raise ValueError(f"field has shape {field.shape}, expected {expected}")
    sq = np.real(grid.inner_Q(field, field))
    if kind == "L2_Q":
        return float(np.sqrt(sq))
    if kind == "H1_Q":
        for axis in range(grid.n):
            d = np.gradient(field, grid.hx, axis=axis + 1, edge_order=2)
            sq += np.real(grid.inner_Q(d, d))
        return float(np.sqrt(sq))
    raise ValueError(f"unknown norm kind {kind!r}")


def export_partition_csv(grid: SpaceTimeGrid, partition: BoundaryPartition, path) -> Path:
    path = Path(path)
    coords = grid.boundary_coords
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["node"]
            + [f"x{i + 1}" for i in range(grid.n)]
            + [f"nu{i + 1}" for i in range(grid.n)]
            + ["face", "corner", "partition"]
        )
        for b, node in enumerate(grid.boundary_nodes):
            axis, side = divmod(int(grid.face[b]), 2)
            writer.writerow(
                [int(node)]
                + [f"{c:.12g}" for c in coords[b]]
                + [f"{c:.0f}" for c in grid.normals[b]]
                + [f"x{axis + 1}={side}", int(grid.is_corner[b]), "plus" if partition.plus_mask[b] else "minus"]
            )
    return path


def face_nodes(grid: SpaceTimeGrid, axis: int, side: int) -> np.ndarray:
    """Boundary-array positions of the nodes whose assigned face is ``{x_axis = side}``."""
    return np.flatnonzero(grid.face == 2 * axis + side)

