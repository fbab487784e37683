"""Recovery of the convection difference and the potential from boundary data.

The pipeline pairs a growing solution ``u2`` of the hidden equation with a
decaying solution ``v`` of the adjoint of the known one. With
``u`` solving the known equation with ``u2``'s lateral data, Green's formula
gives

    int_Q (2 A . grad u2 - qt u2) conj(v) = - int_Sigma conj(v) d_nu (u - u2),

``A = A1 - A2``, ``qt = c1 - c2``. Dividing by ``2 lam`` isolates the Fourier
coefficient of ``eta^2 omega . A`` at ``(tau, xi)``; a divergence-free field
is then assembled from its projections and inverted on a lattice.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fields import CoefficientPair, Expression, VectorField
from .go import (
    CarlemanWeight,
    build_Bd,
    build_Bg,
    build_go_solution,
    build_plane_amplitude,
    build_split_amplitudes,
    conjugated_operator,
    cutoff_eta,
)
from .grid import SpaceTimeGrid, _unit, discrete_norm, partition_boundary
from .solver import _theta, solve_ibvp

logger = logging.getLogger(__name__)

__all__ = [
    "FrequencySample",
    "StabilityParams",
    "FourierLattice",
    "couple_parameters",
    "identity_boundary_terms",
    "integral_identity_residual",
    "fourier_omega_A_hat",
    "fourier_qtilde_hat",
    "assemble_Mxi",
    "solve_component_system",
    "reconstruct_A",
    "reconstruct_qtilde",
    "ReconstructionResult",
    "IdentityBatch",
    "recover_q",
    "FOURIER_SIGN",
]

# int (omega . A) B2 conj(Bd) = FOURIER_SIGN * i |xi| (eta^2 omega . A)^(tau, xi)
# for B2 = build_Bg(A2, A1 - A2, ...) and Bd = build_Bd(-A1, ...), with the
# transform f^(tau, xi) = int f exp(-i (t tau + x . xi)).
FOURIER_SIGN = -1


@dataclass
class FrequencySample:
    tau: float
    xi: np.ndarray
    omega: np.ndarray
    value: complex
    error_budget: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        if abs(self.xi @ self.omega) > 1e-12 * max(1.0, np.linalg.norm(self.xi)):
            raise ValueError("sample direction must be orthogonal to its spatial frequency")


@dataclass
class StabilityParams:
    theta: float = 0.5
    R: float = 1.0
    delta: float = 0.3
    lam: float = 32.0
    alpha: float = float("nan")
    alpha_prime: float = float("nan")
    lam_q: float = float("nan")
    kappa: float = 1.0
    beta: float = 1.0
    mu1: float = 1.0
    mu2: float = 1.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def couple_parameters(R: float, theta: float, n: int) -> StabilityParams:
    """Coupled choice ``delta = R^{-2/3}``, ``lam = R^{alpha + 8 + 2/(3 theta)} e^{2R(1-theta)/theta}``."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if R < 1.0:
        raise ValueError(f"R must be >= 1, got {R}")
    alpha = 6.0 + (n * n + n + 6.0) / (n * theta)
    alpha_q = 6.0 + (n + 1.0) / theta
    growth = math.exp(2.0 * R * (1.0 - theta) / theta)
    return StabilityParams(
        theta=theta,
        R=R,
        delta=R ** (-2.0 / 3.0),
        lam=R ** (alpha + 8.0 + 2.0 / (3.0 * theta)) * growth,
        alpha=alpha,
        alpha_prime=alpha_q,
        lam_q=R ** (alpha_q + 8.0 + 2.0 / (3.0 * theta)) * growth,
    )


def radius_from_dn_norm(dn_norm: float, kappa: float = 1.0, mu1: float | None = None) -> float:
    """Inverse coupling: ``R = log|log d| / kappa`` (A side) or ``(mu1/kappa) log log|log d|`` (q side)."""
    inner = abs(math.log(dn_norm))
    if mu1 is None:
        return math.log(inner) / kappa
    return mu1 / kappa * math.log(math.log(inner))


def _boundary_mask(grid: SpaceTimeGrid, omega, eps: float | None, boundary: str) -> np.ndarray:
    keep = ~grid.is_corner
    if boundary == "full":
        return keep
    if boundary == "measured":
        return keep & partition_boundary(grid, omega, eps).minus_mask
    raise ValueError(f"boundary must be 'full' or 'measured', got {boundary!r}")


def _solve_conjugated(pair, weight, sign, data, grid, theta):
    op = conjugated_operator(pair, weight, sign, grid.T)
    if sign == "growing":
        return solve_ibvp(op, grid, data, theta=theta)[0]
    w, _ = solve_ibvp(op, grid, data[::-1], theta=theta)
    return w[::-1]


def conormal_flux(w: np.ndarray, pair: CoefficientPair, weight: CarlemanWeight, grid: SpaceTimeGrid) -> np.ndarray:
    """Summation-by-parts conormal derivative of a conjugated field vanishing on Sigma.

    For ``w = 0`` on Sigma the five-point scheme of the conjugated operator
    satisfies the discrete Green formula exactly (up to the O(h^2)
    interior mismatch between the scheme's adjoint and the adjoint's scheme)
    with the flux ``(w_b - w_i)/h * (1 - h (A + lam omega) . nu)``, ``i`` the
    interior neighbour of ``b``. The one-sided second-order derivative is
    inconsistent here because the differences carry layers of width
    ``1/(2 lam)``. Corner nodes get zero.
    """
    i1, _ = grid.normal_stencil
    keep = ~grid.is_corner
    flat = w.reshape((w.shape[0], grid.size) + w.shape[1 + grid.n :])
    inner = flat[:, i1]
    pts = [m.ravel()[i1] for m in grid.mesh]
    tt = grid.t[:, None]
    drift = np.zeros((grid.t.size, i1.size))
    for a in range(grid.n):
        comp = pair.A[a]
        val = weight.lam * weight.omega[a] + (0.0 if comp.is_zero else np.asarray(comp(tt, *pts)))
        drift = drift + np.broadcast_to(val, drift.shape) * grid.normals[:, a]
    factor = np.where(keep, 1.0 - grid.hx * drift, 0.0)
    if inner.ndim == 3:
        factor = factor[..., None]
    return -inner / grid.hx * factor


@dataclass
class IdentityBatch:
    """Boundary side of the Green identity for one direction and a batch of frequencies.

    The volume side is approximately
    ``scale_A * (eta^2 omega . A)^ - scale_q * (eta^2 qt)^``, so
    ``scale_A * (eta^2 omega . A)^ - scale_q * (eta^2 qt)^ ~ -boundary``.
    """

    boundary: np.ndarray  # int_Sigma conj(v) d_nu (u - u2), one entry per frequency
    scale_A: np.ndarray
    scale_q: np.ndarray
    w_v: np.ndarray | None = None  # conjugated decaying solution(s), known pair
    w_1: np.ndarray | None = None  # known pair, data of the growing solution
    w_2: np.ndarray | None = None  # hidden pair growing solution
    B2: np.ndarray | None = None
    Bd: np.ndarray | None = None


AMPLITUDES = ("gradient", "split")


def _probe_fields(pair1, pair2, probes, grid):
    if probes == "oracle":
        return pair2.A, pair1.A - pair2.A
    if probes == "born":
        return pair1.A, VectorField.zero(grid.n)
    raise ValueError(f"probes must be 'oracle' or 'born', got {probes!r}")


def identity_boundary_terms(
    pair1: CoefficientPair,
    pair2: CoefficientPair,
    omega,
    lam: float,
    freqs,
    delta: float,
    grid: SpaceTimeGrid,
    *,
    kind: str = "A",
    probes: str = "oracle",
    amplitudes: str = "gradient",
    boundary: str = "full",
    omega0=None,
    eps: float | None = None,
    scheme="crank_nicolson",
    keep_fields: bool = False,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    chunk: int = 8,
) -> IdentityBatch:
    """Boundary side of the identity for every ``(tau, xi)`` in ``freqs`` at one direction.

    ``amplitudes='gradient'``: with ``kind='A'`` the growing amplitude carries the
    full frequency and the gradient factor, with ``kind='q'`` the plane
    amplitude; the decaying amplitude is frequency free. ``amplitudes='split'``
    uses :func:`build_split_amplitudes` for both kinds (the ray-average factor
    only for ``kind='A'``). ``probes='oracle'`` builds the growing amplitude of
    the hidden pair with ``D = A1 - A2``; ``probes='born'`` replaces the hidden
    field by the known one (D = 0). ``noise`` adds relative Gaussian noise to
    the flux differences. ``boundary='measured'`` keeps the nodes of
    ``Sigma_{-, eps/2}(omega0)`` only (``omega0`` defaults to ``omega``).
    """
    omega = _unit(omega, grid.n)
    if kind not in ("A", "q"):
        raise ValueError(f"kind must be 'A' or 'q', got {kind!r}")
    if amplitudes not in AMPLITUDES:
        raise ValueError(f"amplitudes must be one of {AMPLITUDES}, got {amplitudes!r}")
    freqs = [(float(tau), np.asarray(xi, dtype=float)) for tau, xi in freqs]
    theta = _theta(scheme)
    weight = CarlemanWeight(lam, tuple(omega))
    A2, D = _probe_fields(pair1, pair2, probes, grid)
    mask = _boundary_mask(grid, omega if omega0 is None else omega0, eps, boundary)
    wts = grid.time_weights[:, None] * np.where(mask, grid.trace_weights, 0.0)[None, :]
    rng = np.random.default_rng(0) if rng is None else rng
    c = 0.5 * float(np.sum(omega))

    Bd_shared = w_v_shared = None
    if amplitudes == "gradient":
        Bd_shared = build_Bd(-pair1.A, omega, delta, grid)
        w_v_shared = _solve_conjugated(pair1, weight, "decaying", grid.boundary_values(Bd_shared), grid, theta)

    bterm, scale_A, scale_q, kept = [], [], [], []
    for lo in range(0, len(freqs), max(1, chunk)):
        part = freqs[lo : lo + chunk]
        grow, decay = [], []
        for tau, xi in part:
            r = float(np.linalg.norm(xi))
            if amplitudes == "split":
                Bg, Bv, sx = build_split_amplitudes(
                    A2, pair1.A, omega, tau, xi, delta, lam, grid, D=D if kind == "A" else None
                )
                grow.append(Bg)
                decay.append(Bv)
                norm = np.exp(-2j * sx.imag * c)
                scale_A.append(2.0 * sx * norm)
                scale_q.append(norm)
            elif kind == "A":
                grow.append(build_Bg(A2, D, omega, tau, xi, delta, grid))
                scale_A.append(2.0 * lam * FOURIER_SIGN * 1j * r)
                scale_q.append(FOURIER_SIGN * 1j * r)
            else:
                grow.append(build_plane_amplitude(A2, omega, tau, xi, delta, grid))
                scale_A.append(2.0 * lam)
                scale_q.append(1.0)
        B2 = np.stack(grow, axis=-1)
        data = grid.boundary_values(B2)
        if amplitudes == "split":
            Bd = np.stack(decay, axis=-1)
            w_v = _solve_conjugated(pair1, weight, "decaying", grid.boundary_values(Bd), grid, theta)
            vb = np.conj(grid.boundary_values(w_v))
        else:
            Bd, w_v = Bd_shared, w_v_shared
            vb = np.conj(grid.boundary_values(w_v))[..., None]
        w_1 = _solve_conjugated(pair1, weight, "growing", data, grid, theta)
        w_2 = _solve_conjugated(pair2, weight, "growing", data, grid, theta)
        flux = conormal_flux(w_1 - w_2, pair1, weight, grid)
        if noise > 0.0:
            level = noise * np.sqrt(np.mean(np.abs(flux) ** 2, axis=(0, 1), keepdims=True))
            flux = flux + level * (rng.standard_normal(flux.shape) + 1j * rng.standard_normal(flux.shape)) / math.sqrt(2)
        bterm.append(np.einsum("tb,tbk,tbk->k", wts, np.broadcast_to(vb, flux.shape), flux))
        if keep_fields:
            kept.append((w_v, w_1, w_2, B2, Bd))
    out = IdentityBatch(np.concatenate(bterm), np.asarray(scale_A, dtype=complex), np.asarray(scale_q, dtype=complex))
    if keep_fields:
        cat = lambda i: np.concatenate([k[i] for k in kept], axis=-1)  # noqa: E731
        out.w_v = w_v_shared if amplitudes == "gradient" else cat(0)
        out.w_1, out.w_2, out.B2 = cat(1), cat(2), cat(3)
        out.Bd = Bd_shared if amplitudes == "gradient" else cat(4)
    return out


def integral_identity_residual(
    pair1: CoefficientPair,
    pair2: CoefficientPair,
    omega,
    lam: float,
    freq,
    delta: float,
    grid: SpaceTimeGrid,
    *,
    kind: str = "A",
    amplitudes: str = "gradient",
    scheme="crank_nicolson",
) -> dict:
    """Both sides of the Green identity for one frequency, computed in conjugated variables.

    ``lhs = int (2 A . (grad w2 + lam omega w2) - qt w2) conj(w_v)`` and
    ``rhs = - int_Sigma conj(w_v) d_nu (w1 - w2)``; returns lhs, rhs and
    ``residual = |lhs - rhs| / max(|lhs|, |rhs|)``.
    """
    batch = identity_boundary_terms(
        pair1, pair2, omega, lam, [freq], delta, grid, kind=kind, amplitudes=amplitudes, keep_fields=True, scheme=scheme
    )
    omega = np.asarray(omega, dtype=float)
    w2 = batch.w_2[..., 0]
    Adiff = pair1.A - pair2.A
    qt = (pair1.zeroth - pair2.zeroth).on_grid(grid)
    grads = np.gradient(w2, grid.hx, axis=tuple(range(1, grid.n + 1)), edge_order=2)
    drift = sum(a.on_grid(grid) * (g + lam * w * w2) for a, g, w in zip(Adiff, grads, omega))
    w_v = batch.w_v if amplitudes == "gradient" else batch.w_v[..., 0]
    lhs = grid.inner_Q(2.0 * drift - qt * w2, w_v)
    rhs = -batch.boundary[0]
    scale = max(abs(lhs), abs(rhs))
    return {"lhs": complex(lhs), "rhs": complex(rhs), "residual": float(abs(lhs - rhs) / scale) if scale else 0.0}


def fourier_omega_A_hat(
    boundary_term: complex,
    q_term: complex,
    lam: float,
    xi,
    beta: float = 1.0,
    dn_norm: float = 0.0,
    scale: complex | None = None,
) -> tuple[complex, dict]:
    """Estimate of ``(eta^2 omega . A)^(tau, xi)`` from the boundary term.

    ``value = (-boundary_term - q_term) / scale`` with the leading coefficient
    ``scale = 2 lam * FOURIER_SIGN * i |xi|`` of the gradient amplitude by
    default; ``q_term`` is the zeroth-order contribution to the volume side
    when it is known (zero otherwise).
    """
    r = float(np.linalg.norm(xi))
    if scale is None:
        if r == 0.0:
            raise ValueError("the first-order identity degenerates at xi = 0")
        scale = 2.0 * lam * FOURIER_SIGN * 1j * r
    value = (-boundary_term - q_term) / scale
    budget = {"lambda_term": 1.0 / math.sqrt(lam), "dn_term": math.exp(min(beta * lam, 700.0)) * dn_norm}
    return complex(value), budget


def fourier_qtilde_hat(
    boundary_term: complex, A_term: complex = 0.0, lam: float = 1.0, A_norm: float = 0.0, scale: complex = 1.0
) -> tuple[complex, dict]:
    """Estimate of ``(eta^2 qt)^(tau, xi)`` from the zeroth-order pass.

    The identity reads ``scale_A (eta^2 omega . A)^ - scale (eta^2 qt)^ + O(1/lam) = -boundary``,
    so ``value = (boundary_term + A_term) / scale`` with ``A_term`` the
    first-order contribution of a known convection difference (zero when it is
    unknown; its size ``lam ||A||`` is then reported in the budget).
    """
    budget = {"lambda_term": 1.0 / math.sqrt(lam), "A_term": lam * A_norm}
    return complex((boundary_term + A_term) / scale), budget


def assemble_Mxi(xi, omega0, eps: float | None, omega=None) -> dict:
    """``M_xi``: n-1 directions orthogonal to xi plus the row ``xi/|xi|``.

    Cap directions lie within ``eps/2`` of ``omega0``. They are found by
    projecting ``omega0`` and its perturbations along an orthonormal basis of
    ``xi^perp`` onto ``xi^perp`` and renormalising. ``base`` is the
    projection of ``omega0`` itself (``omega`` may fix it); in two dimensions
    it is the only direction, in higher dimensions the directions are spread
    symmetrically around it across the part of ``xi^perp`` inside the cap.
    ``eps=None`` lifts the cap (every direction is available; ``base`` is any
    unit vector of ``xi^perp`` when the projection vanishes).
    """
    xi = np.asarray(xi, dtype=float)
    n = xi.size
    r = np.linalg.norm(xi)
    if r == 0:
        raise ValueError("xi must be nonzero")
    xi_hat = xi / r
    omega0 = _unit(omega0, n)
    # orthonormal basis of xi^perp
    Q, _ = np.linalg.qr(np.column_stack([xi_hat, np.eye(n)]))
    perp = Q[:, 1:n]
    base = omega0 - (omega0 @ xi_hat) * xi_hat
    if omega is not None:
        base = _unit(omega, n)
    if np.linalg.norm(base) < 1e-12:
        if eps is not None:
            raise ValueError("xi is parallel to omega0: no cap direction is orthogonal to xi (xi outside the cone)")
        base = perp[:, 0]
    base = base / np.linalg.norm(base)
    if eps is not None and np.linalg.norm(base - omega0) > eps / 2 + 1e-12:
        raise ValueError(
            f"no direction orthogonal to xi lies in the cap |omega - omega0| <= eps/2 (xi outside the cone; "
            f"closest distance {np.linalg.norm(base - omega0):.4f})"
        )
    dirs = [base]
    if n > 2:
        # spread the directions over the arc of xi^perp inside the cap: base
        # rotated by +-phi, phi as large as the cap allows (at most pi/4, where
        # the pair is orthogonal). On the arc w . omega0 = cos(phi) (base . omega0).
        others = perp - np.outer(base, base @ perp)
        e1 = others[:, np.argmax(np.linalg.norm(others, axis=0))]
        e1 /= np.linalg.norm(e1)
        phi = math.pi / 4
        if eps is not None:
            c = (1.0 - eps * eps / 8.0) / float(base @ omega0)
            phi = min(phi, math.acos(min(c, 1.0)))
            if phi < 1e-6:
                raise ValueError("cap too narrow to supply n-1 independent directions orthogonal to xi")
        dirs = [math.cos(phi) * base + math.sin(phi) * e1, math.cos(phi) * base - math.sin(phi) * e1]
        for j in range(perp.shape[1]):
            if len(dirs) == n - 1:
                break
            e = perp[:, j] - (perp[:, j] @ base) * base - (perp[:, j] @ e1) * e1
            for d in dirs[2:]:
                e = e - (e @ d) * d
            if np.linalg.norm(e) < 1e-8:
                continue
            e /= np.linalg.norm(e)
            dirs.append(math.cos(phi) * base + math.sin(phi) * e)
    M = np.vstack(dirs + [xi_hat])
    det = float(np.linalg.det(M))
    return {"M": M, "directions": np.array(dirs), "base": base, "det": det}


def solve_component_system(G, M: np.ndarray) -> tuple[np.ndarray, float]:
    """Solve ``M A^ = (G_1, ..., G_{n-1}, 0)``; returns the vector and ``cond(M)``."""
    G = np.asarray(G)
    n = M.shape[0]
    if G.shape[0] != n - 1:
        raise ValueError(f"need {n - 1} directional values, got {G.shape[0]}")
    det = np.linalg.det(M)
    if abs(det) < 1e-12:
        raise ValueError(f"M_xi is singular (det = {det:.3e})")
    rhs = np.concatenate([G, np.zeros((1,) + G.shape[1:], dtype=G.dtype)])
    return np.linalg.solve(M, rhs), float(np.linalg.cond(M))


def recover_q(qtilde, A_diff: VectorField, pair1: CoefficientPair, pair2: CoefficientPair, grid: SpaceTimeGrid) -> dict:
    """``q = qt + div A + (|A1|^2 - |A2|^2)`` on the grid; reports the divergence term separately."""
    qtilde = qtilde.on_grid(grid) if isinstance(qtilde, Expression) else np.asarray(qtilde)
    div = A_diff.divergence().on_grid(grid)
    quad = (pair1.A.norm_sq() - pair2.A.norm_sq()).on_grid(grid)
    return {"q": qtilde + div + quad, "div_term_max": float(np.max(np.abs(div)))}


@dataclass(frozen=True)
class FourierLattice:
    """Fourier lattice of the box ``[0, T] x [-pad, 1 + pad]^n``.

    Frequencies are ``tau_k = 2 pi k / T`` and ``xi_m = 2 pi m / L`` with
    ``L = 1 + 2 pad``; the window keeps ``|k| <= K`` and ``|m| <= M``
    (Euclidean length of the integer vector). For a field vanishing outside
    ``Q`` the lattice coefficient equals the continuous transform
    ``f^(tau, xi) = int_Q f exp(-i (t tau + x . xi))`` at that frequency, and
    ``f = (T L^n)^{-1} sum f^ exp(i (t tau + x . xi))`` on the box.
    """

    T: float
    n: int
    K: int
    M: float
    pad: float = 0.0

    def __post_init__(self):
        if self.K < 0 or self.M < 0 or self.pad < 0:
            raise ValueError("K, M and pad must be non-negative")

    @property
    def L(self) -> float:
        return 1.0 + 2.0 * self.pad

    @property
    def volume(self) -> float:
        return self.T * self.L**self.n

    @property
    def mmax(self) -> int:
        return int(math.floor(self.M + 1e-12))

    def tau(self, k) -> float:
        return 2.0 * math.pi * k / self.T

    def xi(self, m) -> np.ndarray:
        return 2.0 * math.pi * np.asarray(m, dtype=float) / self.L

    def indices(self, half: bool = False) -> list[tuple[int, tuple[int, ...]]]:
        """Lattice points ``(k, m)``; ``half`` keeps one point of every pair ``+-(k, m)``."""
        r = self.mmax
        out = []
        for m in np.ndindex(*([2 * r + 1] * self.n)):
            m = tuple(int(v) - r for v in m)
            if sum(v * v for v in m) > self.M**2 + 1e-9:
                continue
            for k in range(-self.K, self.K + 1):
                key = (k,) + m
                if half and key < (0,) * (self.n + 1):
                    continue
                out.append((k, m))
        return sorted(out, key=lambda km: (sum(v * v for v in km[1]), km[1], km[0]))

    def _offsets(self, grid: SpaceTimeGrid) -> int:
        P = self.L / grid.hx
        if abs(P - round(P)) > 1e-9:
            raise ValueError(f"box length {self.L} is not a multiple of the grid step {grid.hx}")
        return int(round(P))

    def transform(self, f: np.ndarray, grid: SpaceTimeGrid) -> dict:
        """Trapezoid-rule transform of a grid function (extra leading axes allowed) at every lattice point.

        Computed with FFTs of the zero-extended samples; equals
        ``grid.inner_Q(f, exp(i(t tau + x . xi)))`` exactly.
        """
        if abs(grid.T - self.T) > 1e-12 or grid.n != self.n:
            raise ValueError("lattice and grid disagree on T or n")
        f = np.asarray(f)
        lead = f.shape[: f.ndim - grid.n - 1]
        w = grid.time_weights.reshape((-1,) + (1,) * grid.n) * grid.space_weights
        g = f * w
        # wrap t = T onto t = 0 for the periodic time sum
        tax = len(lead)
        first = np.take(g, [0], axis=tax) + np.take(g, [grid.Nt], axis=tax)
        g = np.concatenate([first, np.take(g, np.arange(1, grid.Nt), axis=tax)], axis=tax)
        P = self._offsets(grid)
        if P < grid.Nx:
            # pad = 0: the node x = 1 coincides with x = 0 on the periodic box
            for a in range(grid.n):
                ax = tax + 1 + a
                head = np.take(g, np.arange(grid.Nx - P), axis=ax) + np.take(g, np.arange(P, grid.Nx), axis=ax)
                g = np.concatenate([head, np.take(g, np.arange(grid.Nx - P, P), axis=ax)], axis=ax)
        axes = tuple(range(len(lead), len(lead) + grid.n + 1))
        F = np.fft.fftn(g, s=(grid.Nt,) + (P,) * grid.n, axes=axes)
        out = {}
        for k, m in self.indices():
            idx = (k % grid.Nt,) + tuple(v % P for v in m)
            out[(k, m)] = F[(Ellipsis,) + idx]
        return out

    def synthesize(self, coeffs: dict, grid: SpaceTimeGrid) -> np.ndarray:
        """Real field on the grid from lattice coefficients (missing points count as zero).

        Coefficients for one half of the lattice suffice: the partner
        ``(-k, -m)`` is filled with the complex conjugate when absent.
        """
        r, K = self.mmax, self.K
        sample = next(iter(coeffs.values()))
        lead = np.shape(sample)
        C = np.zeros(lead + (2 * K + 1,) + (2 * r + 1,) * self.n, dtype=complex)
        for (k, m), val in coeffs.items():
            if abs(k) > K or max(abs(v) for v in m) > r:
                continue
            C[(Ellipsis, k + K) + tuple(v + r for v in m)] = val
            neg = (-k, tuple(-v for v in m))
            if neg not in coeffs:
                C[(Ellipsis, -k + K) + tuple(-v + r for v in m)] = np.conj(val)
        Et = np.exp(1j * np.outer(grid.t, self.tau(np.arange(-K, K + 1))))
        Ex = np.exp(1j * np.outer(grid.x, 2.0 * math.pi * np.arange(-r, r + 1) / self.L))
        out = np.tensordot(C, Et, axes=([len(lead)], [1]))
        out = np.moveaxis(out, -1, len(lead))
        for a in range(self.n):
            ax = len(lead) + 1 + a
            out = np.moveaxis(np.tensordot(out, Ex, axes=([ax], [1])), -1, ax)
        return np.real(out) / self.volume


def _direction_sets(xi, omega0, eps, mode: str):
    """``assemble_Mxi`` for one frequency; None when the cone excludes it."""
    try:
        return assemble_Mxi(xi, omega0, None if mode == "full_data" else eps)
    except ValueError:
        if mode == "full_data":
            raise
        return None


def _key(omega) -> tuple:
    return tuple(np.round(np.asarray(omega, dtype=float), 12) + 0.0)


@dataclass
class ReconstructionResult:
    """Lattice reconstruction of ``eta_delta^2`` times a difference field."""

    field: np.ndarray
    coefficients: dict
    samples: list
    lattice: FourierLattice
    report: dict

    def to_report(self) -> dict:
        return dict(self.report)


def _relative_errors(rec: np.ndarray, truth: np.ndarray, grid: SpaceTimeGrid) -> dict:
    diff = rec - truth
    comps = (slice(None),) if diff.ndim == grid.n + 1 else range(diff.shape[0])
    num = den = 0.0
    for c in comps:
        d = diff if diff.ndim == grid.n + 1 else diff[c]
        t = truth if truth.ndim == grid.n + 1 else truth[c]
        num += discrete_norm(d, grid) ** 2
        den += discrete_norm(t, grid) ** 2
    l2 = math.sqrt(num)
    return {
        "l2_error": l2,
        "linf_error": float(np.max(np.abs(diff))),
        "truth_l2": math.sqrt(den),
        "rel_l2_error": l2 / math.sqrt(den) if den > 0 else (0.0 if l2 == 0 else math.inf),
    }


def _run_groups(groups, pair1, pair2, lam, delta, grid, kind, opts):
    """Boundary terms for ``{direction: [(label, tau, xi), ...]}``; returns ``{(label, direction): (b, sA, sq)}``."""
    out = {}
    for key, items in groups.items():
        batch = identity_boundary_terms(
            pair1, pair2, np.asarray(key), lam, [(tau, xi) for _, tau, xi in items], delta, grid, kind=kind, **opts
        )
        for j, (label, _, _) in enumerate(items):
            out[(label, key)] = (batch.boundary[j], batch.scale_A[j], batch.scale_q[j])
        logger.info("direction %s: %d frequencies", key, len(items))
    return out


def reconstruct_A(
    pair1: CoefficientPair,
    pair2: CoefficientPair,
    lattice: FourierLattice,
    grid: SpaceTimeGrid,
    *,
    lam: float = 32.0,
    delta: float = 0.3,
    mode: str = "full_data",
    omega0=None,
    eps: float = 1.0,
    probes: str = "oracle",
    amplitudes: str = "split",
    boundary: str = "full",
    scheme="crank_nicolson",
    noise: float = 0.0,
    seed: int = 0,
    chunk: int = 8,
    truth: VectorField | None = None,
) -> ReconstructionResult:
    """Recover ``eta_delta^2 (A1 - A2)`` on the grid from boundary data of the two pairs.

    For every lattice point with ``xi != 0`` the directional coefficients
    ``omega_i . A^`` are extracted along the ``n - 1`` directions of
    ``M_xi``, the divergence-free system is solved and the field is
    synthesised from half of the lattice (real fields). Points with ``xi = 0``
    are set to zero: a divergence-free field with vanishing normal component
    on the boundary has zero spatial mean. ``mode='cone'`` keeps the
    frequencies whose directions fit in the cap ``|omega - omega0| <= eps/2``
    and zero-fills the rest. ``truth`` (the difference field) adds error
    figures to the report.
    """
    if mode not in ("full_data", "cone"):
        raise ValueError(f"mode must be 'full_data' or 'cone', got {mode!r}")
    started = time.perf_counter()
    n = grid.n
    omega0 = np.eye(n)[0] if omega0 is None else _unit(omega0, n)
    systems, groups, omitted = {}, {}, []
    for k, m in lattice.indices(half=True):
        if not any(m):
            continue
        xi = lattice.xi(m)
        sys_ = _direction_sets(xi, omega0, eps, mode)
        if sys_ is None:
            omitted.append((k, m))
            continue
        systems[(k, m)] = sys_
        for w in sys_["directions"]:
            groups.setdefault(_key(w), []).append(((k, m), lattice.tau(k), xi))
    opts = dict(probes=probes, amplitudes=amplitudes, boundary=boundary, omega0=omega0, eps=eps, scheme=scheme,
                noise=noise, rng=np.random.default_rng(seed), chunk=chunk)
    terms = _run_groups(groups, pair1, pair2, lam, delta, grid, "A", opts)
    coeffs, samples, dets, conds = {}, [], [], []
    for (k, m), sys_ in systems.items():
        xi = lattice.xi(m)
        G = []
        for w in sys_["directions"]:
            b, sA, _ = terms[((k, m), _key(w))]
            val, budget = fourier_omega_A_hat(b, 0.0, lam, xi, scale=sA)
            G.append(val)
            samples.append(FrequencySample(lattice.tau(k), xi, w, val, budget))
        vec, cond = solve_component_system(np.asarray(G), sys_["M"])
        coeffs[(k, m)] = vec
        dets.append(abs(sys_["det"]))
        conds.append(cond)
    for k, m in lattice.indices(half=True):
        if not any(m):
            coeffs[(k, m)] = np.zeros(n, dtype=complex)
        elif (k, m) in omitted:
            coeffs[(k, m)] = np.zeros(n, dtype=complex)
    field_ = lattice.synthesize(coeffs, grid)
    report = {
        "lam": lam,
        "delta": delta,
        "mode": mode,
        "amplitudes": amplitudes,
        "probes": probes,
        "n_frequencies": len(systems),
        "n_directions": len(groups),
        "n_omitted": len(omitted),
        "min_abs_det": min(dets) if dets else float("nan"),
        "max_cond": max(conds) if conds else float("nan"),
    }
    if truth is not None:
        eta2 = cutoff_eta(delta, grid.t, 0, grid.T).reshape((-1,) + (1,) * n) ** 2
        report.update(_relative_errors(field_, eta2 * truth.on_grid(grid), grid))
    report["runtime_s"] = time.perf_counter() - started
    return ReconstructionResult(field_, coeffs, samples, lattice, report)


def reconstruct_qtilde(
    pair1: CoefficientPair,
    pair2: CoefficientPair,
    lattice: FourierLattice,
    grid: SpaceTimeGrid,
    *,
    lam: float = 32.0,
    delta: float = 0.3,
    omega0=None,
    A_coefficients: dict | None = None,
    probes: str = "oracle",
    amplitudes: str = "split",
    boundary: str = "full",
    eps: float = 1.0,
    scheme="crank_nicolson",
    noise: float = 0.0,
    seed: int = 0,
    chunk: int = 8,
    truth: Expression | None = None,
) -> ReconstructionResult:
    """Recover ``eta_delta^2 qt`` (``qt = c1 - c2``) from the zeroth-order pass.

    One direction per lattice point (orthogonal to ``xi``, closest to
    ``omega0``; ``omega0`` itself at ``xi = 0``). ``A_coefficients`` (lattice
    coefficients of ``eta^2 (A1 - A2)``, e.g. from :func:`reconstruct_A`)
    removes the first-order term; without it that term stays in the error
    budget. ``truth`` is the expected ``qt``.
    """
    started = time.perf_counter()
    n = grid.n
    omega0 = np.eye(n)[0] if omega0 is None else _unit(omega0, n)
    groups, chosen = {}, {}
    for k, m in lattice.indices(half=True):
        xi = lattice.xi(m)
        w = omega0 if not any(m) else assemble_Mxi(xi, omega0, None)["base"]
        chosen[(k, m)] = w
        groups.setdefault(_key(w), []).append(((k, m), lattice.tau(k), xi))
    opts = dict(probes=probes, amplitudes=amplitudes, boundary=boundary, omega0=omega0, eps=eps, scheme=scheme,
                noise=noise, rng=np.random.default_rng(seed), chunk=chunk)
    terms = _run_groups(groups, pair1, pair2, lam, delta, grid, "q", opts)
    coeffs, samples = {}, []
    for (k, m), w in chosen.items():
        b, sA, sq = terms[((k, m), _key(w))]
        A_term, A_norm = 0.0, 0.0
        if A_coefficients is not None and (k, m) in A_coefficients:
            A_hat = np.asarray(A_coefficients[(k, m)])
            A_term = sA * complex(w @ A_hat)
            A_norm = float(np.linalg.norm(A_hat))
        val, budget = fourier_qtilde_hat(b, A_term, lam, A_norm, scale=sq)
        coeffs[(k, m)] = val
        samples.append(FrequencySample(lattice.tau(k), lattice.xi(m), w, val, budget))
    field_ = lattice.synthesize(coeffs, grid)
    report = {"lam": lam, "delta": delta, "amplitudes": amplitudes, "probes": probes, "n_frequencies": len(coeffs),
              "n_directions": len(groups)}
    if truth is not None:
        eta2 = cutoff_eta(delta, grid.t, 0, grid.T).reshape((-1,) + (1,) * n) ** 2
        report.update(_relative_errors(field_, eta2 * truth.on_grid(grid), grid))
    report["runtime_s"] = time.perf_counter() - started
    return ReconstructionResult(field_, coeffs, samples, lattice, report)
