"""Forward and adjoint IBVP solvers, Neumann traces and the partial DN map.

All equations are brought to the generic form

    d_t w - Lap w + b . grad w + c w = s   in Q,
    w = g on Sigma,  w(0) = w0,

discretised with second-order central differences on the box and an
implicit theta-scheme in time. Batches of boundary data (trailing axis)
share one factorisation per time level.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import splu

from .fields import CoefficientPair, Expression, VectorField
from .grid import BoundaryPartition, SpaceTimeGrid, partition_boundary

logger = logging.getLogger(__name__)

__all__ = [
    "PDEOperator",
    "IBVPSolution",
    "NeumannData",
    "BoundaryDataSet",
    "DNNormEstimate",
    "SCHEMES",
    "expand_operator",
    "forward_operator",
    "adjoint_operator",
    "solve_ibvp",
    "solve_forward",
    "solve_adjoint",
    "normal_derivative",
    "neumann_trace",
    "dn_apply",
    "dn_diff_norm",
    "probe_basis",
    "apply_operator",
]

SCHEMES = {"backward_euler": 1.0, "crank_nicolson": 0.5}


def _theta(scheme) -> float:
    if isinstance(scheme, str):
        try:
            return SCHEMES[scheme]
        except KeyError:
            raise ValueError(f"unknown scheme {scheme!r}; choose from {sorted(SCHEMES)}") from None
    theta = float(scheme)
    if not 0.5 <= theta <= 1.0:
        raise ValueError("theta must lie in [1/2, 1] for unconditional stability")
    return theta


def _scheme_name(theta: float) -> str:
    for name, th in SCHEMES.items():
        if th == theta:
            return name
    return f"theta={theta:g}"


@dataclass
class PDEOperator:
    """Coefficients of ``d_t - Lap + b . grad + c`` as closed-form expressions."""

    drift: VectorField
    zeroth: Expression

    @property
    def n(self) -> int:
        return self.drift.n

    @property
    def depends_on_time(self) -> bool:
        return self.drift.depends_on_time or self.zeroth.depends_on_time

    def time_reversed(self, T: float) -> PDEOperator:
        return PDEOperator(self.drift.time_reversed(T), self.zeroth.time_reversed(T))


def expand_operator(pair: CoefficientPair) -> dict:
    """Expand ``L_{A,q} = d_t - Lap - 2 A . grad + (q - div A - |A|^2)``.

    Returns ``{'drift': 2A, 'zeroth': q - div A - |A|^2}``; the first-order
    part of the operator is ``-drift . grad``.
    """
    return {"drift": pair.A.scale(2), "zeroth": pair.zeroth}


def forward_operator(pair: CoefficientPair) -> PDEOperator:
    return PDEOperator(pair.A.scale(-2), pair.zeroth)


def adjoint_operator(pair: CoefficientPair) -> PDEOperator:
    """``L*_{A,q} = -d_t - sum (d_j - A_j)^2 + conj(q)`` written in reversed time ``s = T - t``.

    Its coefficients (before reversal) are those of ``L_{-A, conj q}``.
    """
    zeroth = pair.q.conjugate() + pair.A.divergence() - pair.A.norm_sq()
    return PDEOperator(pair.A.scale(2), zeroth)


class _Assembler:
    """Sparse stencil bookkeeping for one grid; entry values are filled per time level."""

    def __init__(self, grid: SpaceTimeGrid):
        self.grid = grid
        n, h = grid.n, grid.hx
        interior = grid.interior_nodes
        self.interior = interior
        strides = np.array([grid.Nx ** (n - 1 - a) for a in range(n)])
        pos_of = np.full(grid.size, -1)
        pos_of[interior] = np.arange(interior.size)
        bpos_of = np.full(grid.size, -1)
        bpos_of[grid.boundary_nodes] = np.arange(grid.boundary_nodes.size)
        rows = np.arange(interior.size)
        # offsets: center, then (+e_a, -e_a) per axis
        cols_full = [interior]
        for a in range(n):
            cols_full += [interior + strides[a], interior - strides[a]]
        cols_full = np.stack(cols_full)  # (2n+1, NI)
        self.n_off = cols_full.shape[0]
        self.h = h
        is_int = pos_of[cols_full] >= 0
        e_rows = np.broadcast_to(rows, cols_full.shape)
        ii = np.flatnonzero(is_int.ravel())
        ib = np.flatnonzero(~is_int.ravel())
        self.ii, self.ib = ii, ib
        ni, nb = interior.size, grid.boundary_nodes.size
        m_ii = sps.csc_matrix(
            (np.arange(ii.size, dtype=float) + 1, (e_rows.ravel()[ii], pos_of[cols_full.ravel()[ii]])),
            shape=(ni, ni),
        )
        self.ii_perm = m_ii.data.astype(np.int64) - 1
        self.ii_indices, self.ii_indptr = m_ii.indices, m_ii.indptr
        m_ib = sps.csr_matrix(
            (np.arange(ib.size, dtype=float) + 1, (e_rows.ravel()[ib], bpos_of[cols_full.ravel()[ib]])),
            shape=(ni, nb),
        )
        self.ib_perm = m_ib.data.astype(np.int64) - 1
        self.ib_indices, self.ib_indptr = m_ib.indices, m_ib.indptr
        self.shape_ii, self.shape_ib = (ni, ni), (ni, nb)

    def entries(self, b: np.ndarray | None, c: np.ndarray) -> np.ndarray:
        """Stencil values of ``-Lap + b . grad + c``, shape ``(2n+1, NI)``."""
        n, h = self.grid.n, self.h
        vals = np.empty((self.n_off, c.size), dtype=np.result_type(c, float if b is None else b))
        vals[0] = 2 * n / h**2 + c
        for a in range(n):
            adv = 0.0 if b is None else b[a] / (2 * h)
            vals[1 + 2 * a] = -1.0 / h**2 + adv
            vals[2 + 2 * a] = -1.0 / h**2 - adv
        return vals

    def matrices(self, vals: np.ndarray, diag_shift: float = 0.0, scale: float = 1.0):
        flat = vals.ravel() * scale
        d_ii = flat[self.ii]
        if diag_shift:
            d_ii = d_ii.copy()
            d_ii[: self.grid.interior_nodes.size] += diag_shift  # center entries come first
        K_ii = sps.csc_matrix((d_ii[self.ii_perm], self.ii_indices, self.ii_indptr), shape=self.shape_ii)
        K_ib = sps.csr_matrix((flat[self.ib][self.ib_perm], self.ib_indices, self.ib_indptr), shape=self.shape_ib)
        return K_ii, K_ib


@lru_cache(maxsize=16)
def _assembler(grid: SpaceTimeGrid) -> _Assembler:
    return _Assembler(grid)


def _coefficients(op: PDEOperator, grid: SpaceTimeGrid, t: float, interior: np.ndarray):
    pts = [m.ravel()[interior] for m in grid.mesh]
    b = None
    if not op.drift.is_zero:
        b = np.stack([np.broadcast_to(np.asarray(c(t, *pts), dtype=float), interior.shape) for c in op.drift])
    c = np.asarray(op.zeroth(t, *pts))
    c = np.broadcast_to(c, interior.shape)
    return b, np.array(c, dtype=complex if np.iscomplexobj(c) else float)


class _Factor:
    def __init__(self, M):
        self.lu = splu(M)
        self.real = not np.iscomplexobj(M.data)

    def solve(self, rhs):
        if self.real and np.iscomplexobj(rhs):
            return self.lu.solve(np.ascontiguousarray(rhs.real)) + 1j * self.lu.solve(np.ascontiguousarray(rhs.imag))
        return self.lu.solve(rhs)


class _DefectSolver:
    """Solve ``S x = b`` by defect correction around a frozen factorization.

    Time-dependent coefficients change the step matrix only mildly, so a few
    sweeps with the mid-time factorization replace a fresh LU per step. This
    pays off for one or two right-hand sides; a direct factorization is used
    for larger batches and whenever the sweeps stall.
    """

    def __init__(self, S, frozen: _Factor, tol: float = 1e-11, max_sweeps: int = 12):
        self.S, self.frozen, self.tol, self.max_sweeps = S, frozen, tol, max_sweeps

    def solve(self, rhs):
        x = self.frozen.solve(rhs)
        scale = max(float(np.max(np.abs(rhs))), 1e-300)
        prev = np.inf
        for _ in range(self.max_sweeps):
            r = rhs - self.S @ x
            err = float(np.max(np.abs(r))) / scale
            if err <= self.tol:
                return x
            if err > 0.5 * prev:
                break
            prev = err
            x = x + self.frozen.solve(r)
        return _Factor(self.S).solve(rhs)


def solve_ibvp(
    op: PDEOperator,
    grid: SpaceTimeGrid,
    dirichlet: np.ndarray | None = None,
    *,
    source: np.ndarray | None = None,
    initial: np.ndarray | None = None,
    theta: float = 1.0,
) -> tuple[np.ndarray, float]:
    """March the generic equation; returns ``(w, residual)``.

    ``dirichlet`` has shape ``(Nt+1, nb)`` or ``(Nt+1, nb, k)`` for a batch of
    k problems sharing the operator; ``source`` is ``(Nt+1,) + grid.shape``
    (optionally with the batch axis) and ``initial`` is ``grid.shape``
    (optionally batched). The returned array has shape
    ``(Nt+1,) + grid.shape`` plus the batch axis when one was given.
    """
    asm = _assembler(grid)
    nb, ni = grid.boundary_nodes.size, grid.interior_nodes.size
    batched = dirichlet is not None and np.ndim(dirichlet) == 3
    if dirichlet is None:
        dirichlet = np.zeros((grid.Nt + 1, nb))
    g = np.asarray(dirichlet)
    if g.shape[:2] != (grid.Nt + 1, nb):
        raise ValueError(f"Dirichlet data has shape {g.shape}, expected ({grid.Nt + 1}, {nb}[, k])")
    if not batched:
        g = g[..., None]
    k = g.shape[2]
    dtype = np.result_type(g, float if source is None else source, float if initial is None else initial)
    src = None
    if source is not None:
        src = np.asarray(source).reshape(grid.Nt + 1, grid.size, -1)[:, grid.interior_nodes]
        dtype = np.result_type(dtype, src)
    w = np.zeros((grid.Nt + 1, grid.size, k), dtype=dtype)
    w[:, grid.boundary_nodes] = g
    if initial is not None:
        init = np.asarray(initial).reshape(grid.size, -1)
        w[0, grid.interior_nodes] = init[grid.interior_nodes]
    ht = grid.ht
    interior = grid.interior_nodes
    static = not op.depends_on_time
    cache = {}

    def assemble(tk):
        b, c = _coefficients(op, grid, tk, interior)
        vals = asm.entries(b, c)
        K_ii, K_ib = asm.matrices(vals)
        S, _ = asm.matrices(vals, diag_shift=1.0 / (theta * ht), scale=1.0)
        return K_ii, K_ib, (S * theta).tocsc()

    def mats(tk):
        if static and cache:
            return cache["m"]
        K_ii, K_ib, S = assemble(tk)
        if static or k > 2:
            out = (K_ii, K_ib, _Factor(S))
            if static:
                cache["m"] = out
        else:
            if "frozen" not in cache:
                cache["frozen"] = _Factor(assemble(0.5 * grid.T)[2])
            out = (K_ii, K_ib, _DefectSolver(S, cache["frozen"]))
        return out

    prev = mats(grid.t[0]) if theta < 1.0 else None
    residual = 0.0
    for step in range(grid.Nt):
        t_new = grid.t[step + 1]
        K_ii, K_ib, fac = mats(t_new)
        u_old = w[step, interior]
        rhs = u_old / ht - theta * (K_ib @ g[step + 1])
        if theta < 1.0:
            Kp_ii, Kp_ib, _ = prev
            rhs = rhs - (1 - theta) * (Kp_ii @ u_old + Kp_ib @ g[step])
        if src is not None:
            rhs = rhs + theta * src[step + 1] + (1 - theta) * src[step]
        u_new = fac.solve(rhs)
        lhs = u_new / ht + theta * (K_ii @ u_new)
        scale = max(np.max(np.abs(rhs)), 1e-300)
        residual = max(residual, float(np.max(np.abs(lhs - rhs)) / scale))
        w[step + 1, interior] = u_new
        if theta < 1.0:
            prev = (K_ii, K_ib, fac)
    w = w.reshape((grid.Nt + 1,) + grid.shape + (k,))
    if not batched:
        w = w[..., 0]
    return w, residual


@dataclass
class IBVPSolution:
    u: np.ndarray
    scheme: str
    residual_norm: float
    grid: SpaceTimeGrid = field(repr=False)
    adjoint: bool = False


def _check_compatible(f: np.ndarray, tol: float = 1e-12):
    if np.max(np.abs(f[0])) > tol:
        raise ValueError("Dirichlet data must vanish at t = 0 (compatibility with zero initial data)")


def _as_boundary_data(f, grid: SpaceTimeGrid) -> np.ndarray:
    if isinstance(f, Expression):
        return grid.boundary_values(f.on_grid(grid))
    if callable(f):
        coords = grid.boundary_coords
        tt = grid.t[:, None]
        return np.asarray(f(tt, *(coords[:, i][None, :] for i in range(grid.n))))
    f = np.asarray(f)
    if f.shape[:1] == (grid.Nt + 1,) and f.shape[1:1 + grid.n] == grid.shape:
        return grid.boundary_values(f)
    return f


def solve_forward(
    pair: CoefficientPair,
    f,
    grid: SpaceTimeGrid,
    scheme="backward_euler",
    *,
    initial: np.ndarray | None = None,
    source: np.ndarray | None = None,
) -> IBVPSolution:
    """Solve ``L_{A,q} u = source`` with ``u = f`` on Sigma and ``u(0) = 0``.

    ``initial`` is a testing override for nonzero initial data and is never
    used on DN-map paths. ``f`` may be an Expression, a callable
    ``f(t, x1, ..., xn)``, a boundary array ``(Nt+1, nb[, k])`` or a full grid
    function whose boundary values are taken.
    """
    theta = _theta(scheme)
    g = _as_boundary_data(f, grid)
    if initial is None:
        _check_compatible(g)
    w, res = solve_ibvp(forward_operator(pair), grid, g, source=source, initial=initial, theta=theta)
    return IBVPSolution(w, _scheme_name(theta), res, grid)


def solve_adjoint(pair: CoefficientPair, g, grid: SpaceTimeGrid, scheme="backward_euler", *, source=None) -> IBVPSolution:
    """Solve ``L*_{A,q} v = source`` with ``v = g`` on Sigma and ``v(T) = 0``.

    Implemented as a forward solve in ``s = T - t`` for the coefficients of
    ``L_{-A, conj q}``.
    """
    theta = _theta(scheme)
    data = _as_boundary_data(g, grid)
    if np.max(np.abs(data[-1])) > 1e-12:
        raise ValueError("adjoint Dirichlet data must vanish at t = T")
    op = adjoint_operator(pair).time_reversed(grid.T)
    src = None if source is None else np.asarray(source)[::-1]
    w, res = solve_ibvp(op, grid, data[::-1], source=src, theta=theta)
    return IBVPSolution(w[::-1].copy(), _scheme_name(theta), res, grid, adjoint=True)


def normal_derivative(u: np.ndarray, grid: SpaceTimeGrid) -> np.ndarray:
    """One-sided second-order outward normal derivative at every boundary node.

    ``u`` has shape ``(Nt+1,) + grid.shape`` with an optional trailing batch
    axis; the result is ``(Nt+1, nb[, k])``.
    """
    flat = u.reshape((u.shape[0], grid.size) + u.shape[1 + grid.n :])
    i1, i2 = grid.normal_stencil
    u0 = flat[:, grid.boundary_nodes]
    return (3.0 * u0 - 4.0 * flat[:, i1] + flat[:, i2]) / (2.0 * grid.hx)


@dataclass
class NeumannData:
    """Boundary flux on the measured set; ``values`` is ``(Nt+1, len(nodes)[, k])``."""

    values: np.ndarray
    nodes: np.ndarray  # positions into grid.boundary_nodes
    weights: np.ndarray  # trace quadrature weights on ``nodes``


def neumann_trace(sol: IBVPSolution | np.ndarray, pair: CoefficientPair, partition: BoundaryPartition | None, grid: SpaceTimeGrid | None = None) -> NeumannData:
    """``d_nu u + 2 (A . nu) u`` on ``Sigma_{-, eps/2}(omega0)`` (corner nodes dropped).

    With ``partition=None`` the whole lateral boundary (minus corners) is returned.
    """
    if isinstance(sol, IBVPSolution):
        u, grid = sol.u, sol.grid
    else:
        u = sol
    if u.shape[: 1 + grid.n] != (grid.Nt + 1,) + grid.shape:
        raise ValueError("solution does not live on this grid")
    dnu = normal_derivative(u, grid)
    ub = grid.boundary_values(u)
    if not pair.A.is_zero:
        A_b = np.stack([grid.boundary_values(c.on_grid(grid)) for c in pair.A], axis=-1)
        a_nu = np.einsum("tbi,bi->tb", A_b, grid.normals)
        extra = (slice(None), slice(None)) + (None,) * (dnu.ndim - 2)
        dnu = dnu + 2.0 * a_nu[extra] * ub
    keep = ~grid.is_corner
    if partition is not None:
        keep &= partition.minus_mask
    nodes = np.flatnonzero(keep)
    return NeumannData(dnu[:, nodes], nodes, grid.trace_weights[nodes])


def dn_apply(pair: CoefficientPair, f, grid: SpaceTimeGrid, omega0, eps: float, scheme="backward_euler") -> NeumannData:
    """Partial DN map: solve the forward IBVP with data f and return the measured flux."""
    partition = partition_boundary(grid, omega0, eps)
    return neumann_trace(solve_forward(pair, f, grid, scheme), pair, partition)


@dataclass
class BoundaryDataSet:
    """Dirichlet probes and their measured fluxes on Sigma_{-, eps/2}(omega0)."""

    inputs: np.ndarray  # (Nt+1, nb, k)
    outputs: np.ndarray  # (Nt+1, n_measured, k)
    partition: BoundaryPartition
    nodes: np.ndarray

    def __post_init__(self):
        if np.max(np.abs(self.inputs[0])) > 1e-12:
            raise ValueError("every probe must vanish at t = 0")


def measure(pair: CoefficientPair, probes: np.ndarray, grid: SpaceTimeGrid, omega0, eps: float, scheme="backward_euler") -> BoundaryDataSet:
    """Apply the partial DN map to a batch of probes ``(Nt+1, nb, k)``."""
    partition = partition_boundary(grid, omega0, eps)
    probes = np.asarray(probes)
    sol = solve_forward(pair, probes, grid, scheme)
    data = neumann_trace(sol, pair, partition)
    return BoundaryDataSet(probes, data.values, partition, data.nodes)


def probe_basis(grid: SpaceTimeGrid, size: int, seed: int | None = None) -> np.ndarray:
    """Smooth Dirichlet probes vanishing at t = 0, shape ``(Nt+1, nb, size)``.

    Probe k is ``sin(pi a t / T) * prod_i cos(pi b_i x_i)`` for an enumeration of
    small integer pairs (a >= 1, b); with a seed the enumeration is shuffled.
    """
    coords = grid.boundary_coords
    combos = []
    degree = 0
    while len(combos) < size:
        # all (a, b) with (a - 1) + sum(b) == degree
        for a in range(1, degree + 2):
            rest = degree + 1 - a
            combos += [(a, bs) for bs in np.ndindex(*([rest + 1] * grid.n)) if sum(bs) == rest]
        degree += 1
    if seed is not None:
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(combos))
        combos = [combos[i] for i in order]
    out = np.empty((grid.Nt + 1, coords.shape[0], size))
    for k, (a, bs) in enumerate(combos[:size]):
        spatial = np.prod([np.cos(np.pi * b * coords[:, i]) for i, b in enumerate(bs)], axis=0)
        out[:, :, k] = np.sin(np.pi * a * grid.t / grid.T)[:, None] * spatial[None, :]
    return out


@dataclass
class DNNormEstimate:
    norm: float
    iters: int
    converged: bool
    basis_size: int
    eps: float
    omega0: tuple
    pairs: tuple = ("pair1", "pair2")

    def to_record(self) -> dict:
        return {
            "pairs": list(self.pairs),
            "eps": self.eps,
            "omega0": list(self.omega0),
            "basis_size": self.basis_size,
            "norm": self.norm,
            "iters": self.iters,
            "converged": self.converged,
        }


def _power_iteration(C: np.ndarray, iters: int, tol: float, seed: int = 0) -> tuple[float, int, bool]:
    """Largest eigenvalue of the Hermitian PSD matrix C by power iteration."""
    k = C.shape[0]
    if not np.any(C):
        return 0.0, 0, True
    x = np.random.default_rng(seed).standard_normal(k) + 0j
    x /= np.linalg.norm(x)
    est = 0.0
    for it in range(1, iters + 1):
        y = C @ x
        new = float(np.real(np.vdot(x, y)))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0, it, True
        x = y / ny
        if abs(new - est) <= tol * max(abs(new), 1e-300):
            return max(new, 0.0), it, True
        est = new
    return max(est, 0.0), iters, False


def dn_diff_norm(
    pair1: CoefficientPair,
    pair2: CoefficientPair,
    grid: SpaceTimeGrid,
    omega0,
    eps: float,
    probes: np.ndarray,
    iters: int = 200,
    tol: float = 1e-10,
    scheme="backward_euler",
) -> DNNormEstimate:
    """Largest singular value of ``Lambda_1 - Lambda_2`` restricted to ``span(probes)``.

    Norms are L2(Sigma) on inputs and L2(Sigma_{-, eps/2}) on outputs. The
    square of the answer is the top eigenvalue of ``Gf^{-1/2} Gd Gf^{-1/2}``
    with Gram matrices ``Gf`` (inputs) and ``Gd`` (output differences), found
    by power iteration.
    """
    probes = np.asarray(probes)
    if probes.ndim == 2:
        probes = probes[..., None]
    if probes.shape[-1] == 0:
        raise ValueError("probe basis is empty")
    d1 = measure(pair1, probes, grid, omega0, eps, scheme)
    d2 = measure(pair2, probes, grid, omega0, eps, scheme)
    diff = d1.outputs - d2.outputs
    wt = grid.time_weights[:, None, None]
    ws = grid.trace_weights[d1.nodes][None, :, None]
    Gd = np.einsum("tbi,tbj->ij", np.conj(diff) * wt * ws, diff)
    wsig = grid.surface_weights[None, :, None]
    Gf = np.einsum("tbi,tbj->ij", np.conj(probes) * wt * wsig, probes)
    L = np.linalg.cholesky(Gf)
    Linv = np.linalg.inv(L)
    C = Linv @ Gd @ Linv.conj().T
    C = 0.5 * (C + C.conj().T)
    lam, it, ok = _power_iteration(C, iters, tol)
    if not ok:
        warnings.warn(f"power iteration did not converge in {iters} iterations", stacklevel=2)
    return DNNormEstimate(
        float(np.sqrt(lam)), it, ok, probes.shape[-1], float(eps), tuple(np.asarray(omega0, float)),
        (pair1.name or "pair1", pair2.name or "pair2"),
    )


def apply_operator(pair: CoefficientPair, u: np.ndarray, grid: SpaceTimeGrid, adjoint: bool = False) -> np.ndarray:
    """Discrete ``L_{A,q} u`` (or ``L*_{A,q} u``) on a grid function.

    Second-order differences in every axis (one-sided at the ends in time,
    central in space); spatial boundary rows are left at zero.
    """
    op = adjoint_operator(pair) if adjoint else forward_operator(pair)
    ut = np.gradient(u, grid.ht, axis=0, edge_order=2)
    out = -ut if adjoint else ut.copy()
    core = (slice(None),) + (slice(1, -1),) * grid.n
    h = grid.hx
    tt = grid.t.reshape((-1,) + (1,) * grid.n)
    res = np.zeros_like(u, dtype=np.result_type(u, float))
    acc = out[core].copy()
    for a in range(grid.n):
        fwd = [slice(None)] + [slice(1, -1)] * grid.n
        bwd = list(fwd)
        fwd[1 + a] = slice(2, None)
        bwd[1 + a] = slice(None, -2)
        up, um, uc = u[tuple(fwd)], u[tuple(bwd)], u[core]
        acc -= (up - 2 * uc + um) / h**2
        if not op.drift[a].is_zero:
            b = np.asarray(op.drift[a](tt, *grid.mesh))
            b = np.broadcast_to(b, u.shape)[core]
            acc += b * (up - um) / (2 * h)
    c = np.broadcast_to(np.asarray(op.zeroth(tt, *grid.mesh)), u.shape)[core]
    acc += c * u[core]
    res[core] = acc
    return res


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CDLAB_THREADS", "1")))
    except ValueError:
        return 1
