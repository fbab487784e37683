"""Geometric-optics solutions ``e^{+-phi}(B + R)`` of the forward and adjoint equations.

With ``phi = lam^2 t + lam x . omega`` everything is computed on the
conjugated variable ``w = e^{-+phi} u``, which satisfies

    growing:   d_t w - Lap w - 2(A + lam omega) . grad w + (c - 2 lam omega . A) w = 0,
    decaying: -d_t w - Lap w + 2(A + lam omega) . grad w + (c* - 2 lam omega . A) w = 0,

where ``c = q - div A - |A|^2`` and ``c* = conj(q) + div A - |A|^2``. Neither
``e^{lam^2 T}`` nor ``e^{lam diam}`` is ever formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import sympy as sp

from .fields import CoefficientPair, Expression, VectorField, sample_field
from .grid import SpaceTimeGrid, _unit, discrete_norm
from .solver import PDEOperator, _theta, solve_ibvp

__all__ = [
    "CarlemanWeight",
    "GOSolution",
    "cutoff_eta",
    "cutoff_constants",
    "build_Bd",
    "build_Bg",
    "build_plane_amplitude",
    "split_exponent",
    "build_split_amplitudes",
    "conjugated_operator",
    "build_go_solution",
    "transport_residual",
    "lambda_sobolev_norm",
    "shifted_index_check",
]


@dataclass(frozen=True)
class CarlemanWeight:
    """``phi = lam^2 t + lam x . omega`` and its convexified form.

    ``phi_s = phi - s ((x + x0) . omega)^2 / 2``; ``x0`` must make
    ``(x + x0) . omega`` positive on the closed box. By default
    ``x0 = (1 + sqrt(n)) omega``.
    """

    lam: float
    omega: tuple
    s: float = 0.0
    x0: tuple | None = None

    def __post_init__(self):
        omega = _unit(self.omega, len(self.omega))
        object.__setattr__(self, "omega", tuple(float(w) for w in omega))
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.s < 0:
            raise ValueError("convexification strength must be >= 0")
        n = len(omega)
        x0 = (1.0 + math.sqrt(n)) * omega if self.x0 is None else np.asarray(self.x0, float)
        object.__setattr__(self, "x0", tuple(float(v) for v in x0))
        corners = np.array(list(np.ndindex(*([2] * n))), dtype=float)
        if np.min((corners + x0) @ omega) <= 0:
            raise ValueError("shift point x0 must satisfy (x + x0) . omega > 0 on the closed box")

    @property
    def n(self) -> int:
        return len(self.omega)

    @property
    def omega_array(self) -> np.ndarray:
        return np.asarray(self.omega)

    def phi(self, t, *xs):
        xw = sum(w * x for w, x in zip(self.omega, xs))
        return self.lam**2 * np.asarray(t) + self.lam * xw

    def phi_s(self, t, *xs):
        r = sum(w * (x + a) for w, x, a in zip(self.omega, xs, self.x0))
        return self.phi(t, *xs) - 0.5 * self.s * r**2

    def on_grid(self, grid: SpaceTimeGrid, convexified: bool = False) -> np.ndarray:
        tt = grid.t.reshape((-1,) + (1,) * grid.n)
        f = self.phi_s if convexified else self.phi
        return f(tt, *grid.mesh)


# smooth step S(s) = psi(s) / (psi(s) + psi(1 - s)), psi(s) = exp(-1/s)
_S = sp.Symbol("s", real=True)
_STEP = sp.exp(-1 / _S) / (sp.exp(-1 / _S) + sp.exp(-1 / (1 - _S)))


@lru_cache(maxsize=None)
def _step_derivative(k: int):
    return sp.lambdify(_S, sp.diff(_STEP, _S, k), "numpy")


def _smoothstep(s, k: int = 0) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    if k == 0:
        out[s >= 1.0] = 1.0
    # psi and its derivatives are below 1e-70 within 5e-3 of either end
    mid = (s > 5e-3) & (s < 1.0 - 5e-3)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out[mid] = _step_derivative(k)(s[mid])
    if k == 0:
        out[(s >= 1.0 - 5e-3) & (s < 1.0)] = 1.0
    return out


def cutoff_eta(delta: float, t, k: int = 0, T: float = 1.0) -> np.ndarray:
    """k-th derivative of the cutoff ``eta_delta`` on ``[0, T]``.

    ``eta = S((t - delta)/delta) * S((T - delta - t)/delta)`` with the
    exponential smooth step S, so ``eta = 0`` off ``(delta, T - delta)`` and
    ``eta = 1`` on ``[2 delta, T - 2 delta]``.
    """
    if not 0.0 < delta < T / 4:
        raise ValueError(f"delta must lie in (0, T/4) = (0, {T / 4:g}), got {delta}")
    if k not in (0, 1, 2, 3):
        raise ValueError("derivative order must be 0, 1, 2 or 3")
    t = np.asarray(t, dtype=float)
    a = (t - delta) / delta
    b = (T - delta - t) / delta
    total = np.zeros_like(t)
    for j in range(k + 1):
        total += math.comb(k, j) * _smoothstep(a, j) * (-1) ** (k - j) * _smoothstep(b, k - j)
    return total * delta ** (-k)


def cutoff_constants(kmax: int = 3, samples: int = 20001) -> dict:
    """``C_k`` with ``|eta^{(k)}| <= C_k delta^{-k}``, measured on a fine grid.

    The two steps of ``eta`` never overlap (their transition zones are
    ``[delta, 2 delta]`` and ``[T - 2 delta, T - delta]``), so ``C_k`` is
    ``max |S^{(k)}|``.
    """
    s = np.linspace(0.0, 1.0, samples)
    return {k: float(np.max(np.abs(_smoothstep(s, k)))) for k in range(kmax + 1)}


def _eta_on_grid(delta: float, grid: SpaceTimeGrid) -> np.ndarray:
    return cutoff_eta(delta, grid.t, 0, grid.T).reshape((-1,) + (1,) * grid.n)


@lru_cache(maxsize=64)
def _ray_field(expr_src: str, n: int, omega: tuple, grid: SpaceTimeGrid, upper: str) -> np.ndarray:
    arr = sample_field(Expression(expr_src, n), np.asarray(omega), grid, upper)
    arr.setflags(write=False)
    return arr


def _ray(expr: Expression, omega, grid: SpaceTimeGrid, upper: str) -> np.ndarray:
    if expr.is_zero:
        return np.zeros((grid.Nt + 1,) + grid.shape)
    return _ray_field(expr.source, expr.n, tuple(float(w) for w in omega), grid, upper)


def build_Bd(A: VectorField, omega, delta: float, grid: SpaceTimeGrid) -> np.ndarray:
    """``eta_delta(t) exp(int_0^inf omega . A(t, x + s omega) ds)``; solves ``omega . (grad + A) B = 0``.

    The decaying solution of the adjoint equation for the pair with field
    ``A1`` uses ``build_Bd(-A1, ...)``, which solves ``omega . (grad - A1) B = 0``.
    """
    omega = _unit(omega, grid.n)
    return _eta_on_grid(delta, grid) * np.exp(_ray(A.dot(omega), omega, grid, "to_exit"))


def _check_frequency(omega, xi, n) -> tuple[np.ndarray, np.ndarray]:
    omega = _unit(omega, n)
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size != n:
        raise ValueError(f"xi has {xi.size} components, expected {n}")
    if abs(xi @ omega) > 1e-12 * max(1.0, np.linalg.norm(xi)):
        raise ValueError(f"xi must be orthogonal to omega (xi . omega = {xi @ omega:.3e})")
    return omega, xi


def _plane_wave(tau: float, xi: np.ndarray, grid: SpaceTimeGrid) -> np.ndarray:
    tt = grid.t.reshape((-1,) + (1,) * grid.n)
    phase = tt * tau + sum(k * x for k, x in zip(xi, grid.mesh))
    return np.exp(-1j * phase)


def build_Bg(
    A2: VectorField, D: VectorField, omega, tau: float, xi, delta: float, grid: SpaceTimeGrid
) -> np.ndarray:
    """Growing amplitude ``eta (xi/|xi|) . grad[E e^{int_R omega . D}] e^{int_0^inf omega . A2}``.

    ``E = exp(-i(t tau + x . xi))``. The gradient is exact: the xi-derivative
    of the full-line integral is the ray integral of ``(xi/|xi|) . grad(omega . D)``.
    """
    omega, xi = _check_frequency(omega, xi, grid.n)
    r = float(np.linalg.norm(xi))
    if r == 0.0:
        raise ValueError("xi must be nonzero for the growing amplitude")
    xi_hat = xi / r
    wD = D.dot(omega)
    full = _ray(wD, omega, grid, "full_line")
    dxi = sum(float(c) * g for c, g in zip(xi_hat, wD.grad()) if c != 0.0) if not wD.is_zero else Expression(0, grid.n)
    dfull = _ray(dxi, omega, grid, "full_line")
    half = _ray(A2.dot(omega), omega, grid, "to_exit")
    return _eta_on_grid(delta, grid) * _plane_wave(tau, xi, grid) * np.exp(full + half) * (-1j * r + dfull)


def build_plane_amplitude(A: VectorField, omega, tau: float, xi, delta: float, grid: SpaceTimeGrid) -> np.ndarray:
    """``eta E e^{int_0^inf omega . A}`` (no gradient factor), the amplitude of the zeroth-order pass."""
    omega, xi = _check_frequency(omega, xi, grid.n)
    half = _ray(A.dot(omega), omega, grid, "to_exit")
    return _eta_on_grid(delta, grid) * _plane_wave(tau, xi, grid) * np.exp(half)


def split_exponent(lam: float, tau: float, xi) -> complex:
    """``s = sqrt(lam^2 + |xi|^2/4 - i tau/2)`` (principal root).

    ``exp(-i(t tau + x . xi)/2 + (s - lam) x . omega)`` solves the growing
    conjugated heat equation exactly for ``xi`` orthogonal to ``omega``, and
    ``exp(+i(t tau + x . xi)/2 + (lam - s) x . omega)`` solves the decaying one.
    """
    r2 = float(np.dot(xi, xi))
    return complex(np.sqrt(complex(lam * lam + 0.25 * r2, -0.5 * tau)))


def _ray_average_factor(D: VectorField, omega, grid: SpaceTimeGrid) -> np.ndarray:
    # h = F / (1 - e^{-F}), F the full-line ray integral of omega . D: constant
    # along rays and cancels the ray average of (omega . D) e^{-int_0^inf omega . D}
    if D.is_zero:
        return np.ones((grid.Nt + 1,) + grid.shape)
    F = _ray(D.dot(omega), omega, grid, "full_line")
    den = -np.expm1(-F)
    small = np.abs(F) < 1e-8
    return np.where(small, 1.0 + 0.5 * F, F / np.where(small, 1.0, den))


def build_split_amplitudes(
    A_grow: VectorField,
    A_decay: VectorField,
    omega,
    tau: float,
    xi,
    delta: float,
    lam: float,
    grid: SpaceTimeGrid,
    D: VectorField | None = None,
) -> tuple[np.ndarray, np.ndarray, complex]:
    """Amplitudes carrying half of the frequency each.

    The growing amplitude is ``eta E_h e^{(s-lam)(x.omega - c)} e^{int_0^inf omega . A_grow} h``
    and the decaying one ``eta conj(E_h) e^{(lam-s)(x.omega - c)} e^{-int_0^inf omega . A_decay}``
    with ``E_h = exp(-i(t tau + x . xi)/2)``, ``s`` from :func:`split_exponent`
    and ``c`` the value of ``x . omega`` at the centre of the domain. The
    real parts of the two exponents cancel in the product, which is
    ``eta^2 E e^{2 i Im(s) (x.omega - c)}``: the frequency shift ``-2 Im(s) omega``
    is ``O(tau / lam)``. ``h`` (from ``D = A1 - A2``, optional) removes the
    nonlinear dependence on the difference along each ray. Returns
    ``(B_grow, B_decay, s)``.
    """
    omega, xi = _check_frequency(omega, xi, grid.n)
    s = split_exponent(lam, tau, xi)
    xo = sum(w * x for w, x in zip(omega, grid.mesh))
    c = 0.5 * float(np.sum(omega))
    half = _plane_wave(0.5 * tau, 0.5 * xi, grid)
    eta = _eta_on_grid(delta, grid)
    grow = eta * half * np.exp((s - lam) * (xo - c) + _ray(A_grow.dot(omega), omega, grid, "to_exit"))
    if D is not None:
        grow = grow * _ray_average_factor(D, omega, grid)
    decay = eta * np.conj(half) * np.exp((lam - s) * (xo - c) - _ray(A_decay.dot(omega), omega, grid, "to_exit"))
    return grow, decay, s


def conjugated_operator(pair: CoefficientPair, weight: CarlemanWeight, sign: str, T: float | None = None) -> PDEOperator:
    """Operator for ``w = e^{-+phi} u`` in the generic marching form.

    ``sign='growing'``: forward in t. ``sign='decaying'``: coefficients of the
    adjoint conjugation, already reversed to ``s = T - t`` (T required).
    """
    lam = weight.lam
    omega = weight.omega_array
    shift = VectorField([Expression(lam * w, pair.n) for w in omega], pair.n)
    wA = pair.A.dot(omega) * (2 * lam)
    if sign == "growing":
        return PDEOperator((pair.A + shift).scale(-2), pair.zeroth - wA)
    if sign == "decaying":
        if T is None:
            raise ValueError("final time T is needed for the decaying operator")
        zeroth = pair.q.conjugate() + pair.A.divergence() - pair.A.norm_sq() - wA
        return PDEOperator((pair.A + shift).scale(2), zeroth).time_reversed(T)
    raise ValueError(f"sign must be 'growing' or 'decaying', got {sign!r}")


@dataclass
class GOSolution:
    """``u = e^{+-phi} (B + R)``; ``w = B + R`` is stored, ``u`` is formed on demand."""

    sign: str
    B: np.ndarray
    R: np.ndarray
    weight: CarlemanWeight
    grid: SpaceTimeGrid = field(repr=False)
    freq: tuple | None = None
    delta: float | None = None
    residual_norm: float = 0.0

    def __post_init__(self):
        if self.freq is not None:
            _check_frequency(self.weight.omega, self.freq[1], self.grid.n)

    @property
    def w(self) -> np.ndarray:
        return self.B + self.R

    @property
    def u(self) -> np.ndarray:
        """Unconjugated solution; overflows for large lambda (use ``w``)."""
        phi = self.weight.on_grid(self.grid)
        if self.B.ndim > phi.ndim:
            phi = phi[..., None]
        return np.exp(phi if self.sign == "growing" else -phi) * self.w

    def remainder_norm(self, k: int = 0) -> float | np.ndarray:
        """``||R||`` in discrete ``L^2(0,T; H^k)``, k in {0, 1} (one value per batch column)."""
        kind = {0: "L2_Q", 1: "H1_Q"}[k]
        if self.R.ndim == 1 + self.grid.n:
            return discrete_norm(self.R, self.grid, kind)
        return np.array([discrete_norm(self.R[..., j], self.grid, kind) for j in range(self.R.shape[-1])])


def build_go_solution(
    pair: CoefficientPair,
    amplitude: np.ndarray,
    weight: CarlemanWeight,
    sign: str,
    grid: SpaceTimeGrid,
    scheme="crank_nicolson",
    *,
    freq=None,
    delta=None,
    lambda0: float = 1.0,
) -> GOSolution:
    """Constructive remainder: solve the conjugated equation with lateral data ``B|_Sigma``.

    Growing solutions start from zero at t = 0, decaying ones end at zero at
    t = T, so the remainder ``R = w - B`` vanishes on the lateral boundary.
    ``amplitude`` may carry a trailing batch axis.
    """
    if weight.lam < lambda0:
        raise ValueError(f"lambda={weight.lam} is below lambda0={lambda0}")
    if weight.s != 0.0:
        raise ValueError("geometric-optics solutions use the plain weight (s = 0)")
    theta = _theta(scheme)
    B = np.asarray(amplitude)
    data = grid.boundary_values(B)
    op = conjugated_operator(pair, weight, sign, grid.T)
    if sign == "growing":
        if np.max(np.abs(B[0])) > 1e-12:
            raise ValueError("growing amplitude must vanish at t = 0")
        w, res = solve_ibvp(op, grid, data, theta=theta)
    else:
        if np.max(np.abs(B[-1])) > 1e-12:
            raise ValueError("decaying amplitude must vanish at t = T")
        w, res = solve_ibvp(op, grid, data[::-1], theta=theta)
        w = w[::-1]
    return GOSolution(sign, B, w - B, weight, grid, freq, delta, res)


def transport_residual(B: np.ndarray, A: VectorField, omega, grid: SpaceTimeGrid) -> float:
    """max over interior nodes of ``|omega . (grad + A) B|`` (central differences)."""
    omega = _unit(omega, grid.n)
    core = (slice(None),) + (slice(1, -1),) * grid.n
    acc = np.zeros(B[core].shape, dtype=complex)
    for a, w in enumerate(omega):
        if w == 0.0:
            continue
        fwd = [slice(None)] + [slice(1, -1)] * grid.n
        bwd = list(fwd)
        fwd[1 + a], bwd[1 + a] = slice(2, None), slice(None, -2)
        acc += w * (B[tuple(fwd)] - B[tuple(bwd)]) / (2 * grid.hx)
    if not A.is_zero:
        acc += A.dot(omega).on_grid(grid)[core] * B[core]
    return float(np.max(np.abs(acc)))


def lambda_sobolev_norm(f: np.ndarray, grid: SpaceTimeGrid, lam: float, m: float, pad: int = 2) -> float:
    """``||f||_{L^2(0,T; H^m_lam)}`` with symbol ``(lam^2 + |xi|^2)^{m/2}`` on the zero-extended field.

    Normalised so that ``m = 0`` gives the discrete (rectangle rule) L2 norm.
    """
    N = pad * grid.Nx
    axes = tuple(range(1, grid.n + 1))
    F = np.fft.fftn(f, s=(N,) * grid.n, axes=axes)
    k = 2 * np.pi * np.fft.fftfreq(N, grid.hx)
    ksq = sum(np.meshgrid(*([k**2] * grid.n), indexing="ij"))
    sym = (lam**2 + ksq) ** m
    per_t = np.sum(sym * np.abs(F) ** 2, axis=axes) * grid.hx**grid.n / N**grid.n
    return float(np.sqrt(np.sum(grid.time_weights * per_t)))


def _conjugated_apply(u: Expression, pair: CoefficientPair, weight: CarlemanWeight) -> Expression:
    """``P_lam u = L u - 2 lam omega . (grad + A) u`` in closed form."""
    Lu = u.diff("t") - u.laplacian() + pair.zeroth * u
    for j in range(pair.n):
        Lu = Lu - pair.A[j] * u.diff(j) * 2
    om = weight.omega
    grad_part = sum((u.diff(j) * float(om[j]) for j in range(pair.n) if om[j] != 0.0), Expression(0, pair.n))
    return Lu - (grad_part + pair.A.dot(om) * u) * (2 * weight.lam)


def shifted_index_check(pair: CoefficientPair, weight: CarlemanWeight, u: Expression, grid: SpaceTimeGrid, margin: int = 2) -> dict:
    """Both sides of the index-shifting inequality for a test function compactly supported in Q.

    Returns ``{'lhs': ||u||_{L^2 H^{-1}_lam}, 'rhs': ||P_lam u||_{L^2 H^{-2}_lam}}``.
    """
    if not isinstance(u, Expression):
        u = Expression(u, grid.n)
    vals = u.on_grid(grid)
    if np.any(vals):
        mask = np.ones(vals.shape, dtype=bool)
        core = (slice(margin, -margin),) * (grid.n + 1)
        mask[core] = False
        if np.max(np.abs(vals[mask])) > 0.0:
            raise ValueError(f"test function must vanish within {margin} cells of the boundary of Q")
    if not np.any(vals):
        return {"lhs": 0.0, "rhs": 0.0}
    Pu = _conjugated_apply(u, pair, weight).on_grid(grid)
    return {
        "lhs": lambda_sobolev_norm(vals, grid, weight.lam, -1.0),
        "rhs": lambda_sobolev_norm(Pu, grid, weight.lam, -2.0),
    }
