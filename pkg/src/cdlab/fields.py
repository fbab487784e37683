"""Closed-form coefficient fields: expressions, vector fields, coefficient pairs, gauges and ray integrals."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import sympy as sp

from .grid import SpaceTimeGrid, _unit

__all__ = [
    "Expression",
    "VectorField",
    "CoefficientPair",
    "GaugeFunction",
    "make_divfree_field",
    "ray_integral",
    "ray_integral_scalar",
    "ray_lengths",
    "apply_gauge",
    "sample_field",
]

_T = sp.Symbol("t", real=True)
_X = tuple(sp.Symbol(f"x{i}", real=True) for i in range(1, 4))
_FUNCS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "exp": sp.exp,
    "sinh": sp.sinh,
    "cosh": sp.cosh,
    "tanh": sp.tanh,
    "sqrt": sp.sqrt,
    "pi": sp.pi,
    "E": sp.E,
}


def _namespace(n: int) -> dict:
    ns = dict(_FUNCS)
    ns["t"] = _T
    for i in range(n):
        ns[f"x{i + 1}"] = _X[i]
    for alias, i in (("x", 0), ("y", 1), ("z", 2)):
        if i < n:
            ns[alias] = _X[i]
    return ns


class Expression:
    """Scalar closed-form function of ``(t, x1, ..., xn)``.

    Built from a string in a small language (polynomials, ``sin``, ``cos``,
    ``exp``, ... of ``t`` and ``x1..xn``; ``x, y, z`` are aliases) or from a
    sympy expression. Derivatives are exact.

    >>> f = Expression("t*x1*x2", 2)
    >>> f.diff("x1").source
    't*x2'
    """

    def __init__(self, source, n: int):
        self.n = int(n)
        if isinstance(source, Expression):
            expr = source.expr
        elif isinstance(source, sp.Basic):
            expr = source
        elif isinstance(source, (int, float)):
            expr = sp.sympify(source)
        else:
            try:
                expr = sp.sympify(str(source), locals=_namespace(self.n), rational=False)
            except (sp.SympifyError, SyntaxError, TypeError) as exc:
                raise ValueError(f"cannot parse expression {source!r}: {exc}") from exc
        allowed = {_T, *_X[: self.n]}
        extra = expr.free_symbols - allowed
        if extra:
            raise ValueError(f"expression {source!r} uses unknown symbols {sorted(map(str, extra))}")
        self.expr = expr
        self._derivs: dict = {}

    def __getstate__(self):
        # the lambdified evaluator is rebuilt on demand (it does not pickle)
        return {"n": self.n, "expr": self.expr, "_derivs": {}}

    @property
    def source(self) -> str:
        return str(self.expr)

    def __repr__(self) -> str:
        return f"Expression({self.source!r}, n={self.n})"

    @cached_property
    def _func(self):
        return sp.lambdify((_T, *_X[: self.n]), self.expr, modules="numpy")

    @property
    def depends_on_time(self) -> bool:
        return _T in self.expr.free_symbols

    @property
    def is_zero(self) -> bool:
        return self.expr == 0

    def __call__(self, t, *xs):
        t = np.asarray(t, dtype=float)
        xs = [np.asarray(x, dtype=float) for x in xs]
        shape = np.broadcast_shapes(t.shape, *(x.shape for x in xs))
        out = self._func(t, *xs)
        return np.broadcast_to(np.asarray(out), shape) if np.shape(out) != shape else np.asarray(out)

    def _symbol(self, var):
        if isinstance(var, int):
            return _X[var]
        if var == "t":
            return _T
        return _namespace(self.n)[var]

    def diff(self, *vars) -> Expression:
        """Exact partial derivative; variables given as ``'t'``, ``'x1'`` or axis index 0..n-1."""
        key = tuple(vars)
        if key not in self._derivs:
            syms = [self._symbol(v) for v in vars]
            self._derivs[key] = Expression(sp.diff(self.expr, *syms), self.n)
        return self._derivs[key]

    def grad(self) -> VectorField:
        return VectorField([self.diff(i) for i in range(self.n)])

    def laplacian(self) -> Expression:
        return Expression(sum(sp.diff(self.expr, x, 2) for x in _X[: self.n]), self.n)

    def _wrap(self, other) -> sp.Basic:
        if isinstance(other, Expression):
            return other.expr
        return sp.sympify(other)

    def __add__(self, other):
        return Expression(self.expr + self._wrap(other), self.n)

    __radd__ = __add__

    def __sub__(self, other):
        return Expression(self.expr - self._wrap(other), self.n)

    def __rsub__(self, other):
        return Expression(self._wrap(other) - self.expr, self.n)

    def __mul__(self, other):
        return Expression(self.expr * self._wrap(other), self.n)

    __rmul__ = __mul__

    def __neg__(self):
        return Expression(-self.expr, self.n)

    def conjugate(self) -> Expression:
        return Expression(sp.conjugate(self.expr), self.n)

    def time_reversed(self, T: float) -> Expression:
        """The expression evaluated at ``T - t``."""
        return Expression(self.expr.subs(_T, T - _T), self.n)

    def simplify(self) -> Expression:
        return Expression(sp.simplify(self.expr), self.n)

    def on_grid(self, grid: SpaceTimeGrid, times=None) -> np.ndarray:
        """Sample on all grid nodes; returns shape ``(len(times),) + grid.shape``."""
        times = grid.t if times is None else np.asarray(times, dtype=float)
        tt = times.reshape((-1,) + (1,) * grid.n)
        out = np.asarray(self(tt, *grid.mesh))
        return np.array(out, dtype=complex if np.iscomplexobj(out) else float)


class VectorField:
    """n-component closed-form vector field on Q."""

    def __init__(self, components, n: int | None = None):
        comps = list(components)
        if n is None:
            n = comps[0].n if isinstance(comps[0], Expression) else len(comps)
        self.components = [c if isinstance(c, Expression) else Expression(c, n) for c in comps]
        self.n = n
        if len(self.components) != n:
            raise ValueError(f"vector field needs {n} components, got {len(self.components)}")

    @classmethod
    def zero(cls, n: int) -> VectorField:
        return cls(["0"] * n, n)

    def __repr__(self) -> str:
        return f"VectorField({[c.source for c in self.components]})"

    def __getitem__(self, i) -> Expression:
        return self.components[i]

    def __iter__(self):
        return iter(self.components)

    def __add__(self, other: VectorField) -> VectorField:
        return VectorField([a + b for a, b in zip(self, other)], self.n)

    def __sub__(self, other: VectorField) -> VectorField:
        return VectorField([a - b for a, b in zip(self, other)], self.n)

    def __neg__(self) -> VectorField:
        return VectorField([-a for a in self], self.n)

    def scale(self, c) -> VectorField:
        return VectorField([a * c for a in self], self.n)

    @property
    def is_zero(self) -> bool:
        return all(c.is_zero for c in self)

    @property
    def depends_on_time(self) -> bool:
        return any(c.depends_on_time for c in self)

    def dot(self, omega) -> Expression:
        expr = sum(float(w) * c.expr for w, c in zip(omega, self) if w != 0.0)
        return Expression(expr, self.n)

    def divergence(self) -> Expression:
        return Expression(sum(c.diff(i).expr for i, c in enumerate(self)), self.n)

    def norm_sq(self) -> Expression:
        return Expression(sum(c.expr**2 for c in self), self.n)

    def time_reversed(self, T: float) -> VectorField:
        return VectorField([c.time_reversed(T) for c in self], self.n)

    def __call__(self, t, *xs) -> np.ndarray:
        return np.stack([np.asarray(c(t, *xs), dtype=float) for c in self])

    def on_grid(self, grid: SpaceTimeGrid, times=None) -> np.ndarray:
        """Shape ``(n, len(times)) + grid.shape``."""
        return np.stack([c.on_grid(grid, times) for c in self])


def _w_inf(expr: Expression, grid: SpaceTimeGrid, order: int) -> float:
    best = 0.0
    frontier = [expr]
    variables = ["t"] + list(range(grid.n))
    seen = set()
    for _ in range(order + 1):
        nxt = []
        for e in frontier:
            key = e.source
            if key in seen:
                continue
            seen.add(key)
            best = max(best, float(np.max(np.abs(e.on_grid(grid)))))
            nxt.extend(e.diff(v) for v in variables)
        frontier = nxt
    return best


@dataclass
class CoefficientPair:
    """Convection term ``A`` and potential ``q`` of ``L_{A,q} = d_t - sum (d_j + A_j)^2 + q``."""

    A: VectorField
    q: Expression
    m_bound: float | None = None
    divfree: bool = False
    name: str = ""

    def __post_init__(self):
        if not isinstance(self.q, Expression):
            self.q = Expression(self.q, self.A.n)

    @classmethod
    def from_strings(cls, A, q="0", **kw) -> CoefficientPair:
        n = len(A)
        return cls(VectorField(A, n), Expression(q, n), **kw)

    @property
    def n(self) -> int:
        return self.A.n

    @property
    def depends_on_time(self) -> bool:
        return self.A.depends_on_time or self.q.depends_on_time

    @cached_property
    def zeroth(self) -> Expression:
        """Zeroth-order coefficient ``q - div A - |A|^2`` of the expanded operator."""
        return self.q - self.A.divergence() - self.A.norm_sq()

    def admissibility_norm(self, grid: SpaceTimeGrid) -> float:
        """Sampled ``max_j ||A_j||_{W^{2,inf}} + ||q||_{W^{1,inf}}`` (sup over derivatives of order <= k)."""
        a = max(_w_inf(c, grid, 2) for c in self.A)
        return a + _w_inf(self.q, grid, 1)

    def check_admissible(self, grid: SpaceTimeGrid, tol_div: float = 1e-10) -> float:
        norm = self.admissibility_norm(grid)
        if self.m_bound is not None and norm > self.m_bound:
            raise ValueError(f"coefficient norm {norm:.6g} exceeds admissibility bound m={self.m_bound}")
        if self.divfree:
            div = max_divergence(self.A, grid)
            if div > tol_div:
                raise ValueError(f"field flagged divergence-free has max |div A| = {div:.3e} > {tol_div:.1e}")
        return norm

    def with_(self, A=None, q=None, name=None) -> CoefficientPair:
        return CoefficientPair(
            self.A if A is None else A,
            self.q if q is None else q,
            self.m_bound,
            self.divfree,
            self.name if name is None else name,
        )


def max_divergence(A: VectorField, grid: SpaceTimeGrid) -> float:
    interior = (slice(None),) + (slice(1, -1),) * grid.n
    return float(np.max(np.abs(A.divergence().on_grid(grid)[interior])))


def make_divfree_field(stream, n: int = 2) -> VectorField:
    """Divergence-free field from stream potentials.

    For n = 2, ``stream`` is one potential psi and ``A = (d2 psi, -d1 psi)``.
    For n > 2, ``stream`` lists the n(n-1)/2 potentials psi_ij (i < j, in
    lexicographic order) and ``A_i = sum_j d_j psi_ij`` with
    ``psi_ji = -psi_ij``.
    """
    if n == 2 and not isinstance(stream, (list, tuple)):
        stream = [stream]
    stream = [s if isinstance(s, Expression) else Expression(s, n) for s in stream]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if len(stream) != len(pairs):
        raise ValueError(f"n={n} needs {len(pairs)} stream potentials, got {len(stream)}")
    comps = [sp.Integer(0)] * n
    for (i, j), psi in zip(pairs, stream):
        comps[i] = comps[i] + sp.diff(psi.expr, _X[j])
        comps[j] = comps[j] - sp.diff(psi.expr, _X[i])
    return VectorField([Expression(c, n) for c in comps], n)


def ray_lengths(points: np.ndarray, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward exit and backward entry parameters of the lines ``x + s omega`` through the unit box.

    points has shape ``(..., n)`` and must lie in the closed box.
    """
    fwd = np.full(points.shape[:-1], np.inf)
    bwd = np.full(points.shape[:-1], np.inf)
    # tiny components overflow to inf, which the minimum discards
    with np.errstate(over="ignore"):
        for i, w in enumerate(omega):
            if w > 0:
                fwd = np.minimum(fwd, (1.0 - points[..., i]) / w)
                bwd = np.minimum(bwd, points[..., i] / w)
            elif w < 0:
                fwd = np.minimum(fwd, -points[..., i] / w)
                bwd = np.minimum(bwd, (points[..., i] - 1.0) / w)
    return np.maximum(fwd, 0.0), np.maximum(bwd, 0.0)


def _simpson_weights(m: int) -> np.ndarray:
    w = np.ones(m + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def ray_integral_scalar(
    f: Expression,
    omega,
    t,
    points: np.ndarray,
    upper: str = "to_exit",
    step: float = 1.0 / 128,
) -> np.ndarray:
    """Composite Simpson integral of ``f(t, x + s omega)`` along rays through ``points``.

    ``upper='to_exit'`` integrates over ``s`` in ``[0, exit]``; ``'full_line'``
    over the whole chord of the box. ``f`` is extended by zero outside the
    closed box. ``t`` broadcasts against ``points[..., 0]``.
    """
    omega = np.asarray(omega, dtype=float)
    points = np.asarray(points, dtype=float)
    if abs(np.linalg.norm(omega) - 1.0) > 1e-12:
        raise ValueError(f"omega must be a unit vector, |omega|={np.linalg.norm(omega)}")
    if upper not in ("to_exit", "full_line"):
        raise ValueError(f"unknown ray range {upper!r}")
    fwd, bwd = ray_lengths(points, omega)
    lo = -bwd if upper == "full_line" else np.zeros_like(fwd)
    length = fwd - lo
    if f.is_zero or not np.any(length > 0):
        return np.zeros(np.broadcast_shapes(np.shape(t), length.shape))
    m = max(2, int(math.ceil(float(np.max(length)) / step)))
    m += m % 2
    u = np.linspace(0.0, 1.0, m + 1)
    s = lo[..., None] + length[..., None] * u
    pts = points[..., None, :] + s[..., None] * omega
    np.clip(pts, 0.0, 1.0, out=pts)
    tt = np.asarray(t, dtype=float)[..., None]
    vals = f(tt, *(pts[..., i] for i in range(points.shape[-1])))
    h = length / m
    return h * np.tensordot(vals, _simpson_weights(m), axes=([-1], [0]))


def ray_integral(A: VectorField, omega, t, x, upper: str = "to_exit", step: float = 1.0 / 128):
    """``int omega . A(t, x + s omega) ds`` over the exit ray or the full chord (zero extension)."""
    omega = _unit(omega, A.n)
    x = np.asarray(x, dtype=float)
    return ray_integral_scalar(A.dot(omega), omega, t, x, upper=upper, step=step)


def _split_time(f: Expression):
    """``(g, h)`` with ``f = g(t) h(x)`` when f separates that way, else None."""
    if not f.depends_on_time:
        return None
    parts = sp.separatevars(f.expr, [_T], dict=True)
    if not parts or _T not in parts:
        return None
    g, h = parts[_T], parts["coeff"]
    if g.free_symbols - {_T} or _T in h.free_symbols:
        return None
    return Expression(g, f.n), Expression(h, f.n)


def sample_field(
    f: Expression, omega, grid: SpaceTimeGrid, upper: str, step: float | None = None
) -> np.ndarray:
    """Ray integral of ``f`` from every grid node, shape ``(Nt + 1,) + grid.shape``."""
    step = grid.hx / 2 if step is None else step
    pts = np.stack(grid.mesh, axis=-1)
    split = _split_time(f)
    if split is not None:
        g, h = split
        spatial = ray_integral_scalar(h, omega, 0.0, pts, upper=upper, step=step)
        return np.asarray(g(grid.t, *([0.0] * grid.n)), dtype=float).reshape((-1,) + (1,) * grid.n) * spatial
    out = np.empty((grid.Nt + 1,) + grid.shape)
    for k, tk in enumerate(grid.t):
        out[k] = ray_integral_scalar(f, omega, tk, pts, upper=upper, step=step)
    return out


@dataclass
class GaugeFunction:
    """Scalar ``Phi`` on Q vanishing on the lateral boundary."""

    phi: Expression
    tol: float = 1e-12
    trace_max: float = field(default=0.0, init=False)

    def validate(self, grid: SpaceTimeGrid) -> GaugeFunction:
        trace = grid.boundary_values(self.phi.on_grid(grid))
        self.trace_max = float(np.max(np.abs(trace)))
        if self.trace_max > self.tol:
            raise ValueError(f"gauge function does not vanish on Sigma (max |Phi| = {self.trace_max:.3e})")
        return self

    def normal_derivative_max(self, grid: SpaceTimeGrid) -> float:
        """max |d_nu Phi| on Sigma; the partial DN map is gauge invariant only when this vanishes."""
        grad = self.phi.grad().on_grid(grid)
        g = np.stack([grid.boundary_values(c) for c in grad], axis=-1)
        return float(np.max(np.abs(np.einsum("tbi,bi->tb", g, grid.normals))))


def apply_gauge(pair: CoefficientPair, gauge: GaugeFunction, grid: SpaceTimeGrid) -> CoefficientPair:
    """Gauge transform ``(A + grad Phi, q + d_t Phi)``.

    This is the pair of ``e^{-Phi} L_{A,q} e^{Phi}``, so ``u -> e^{-Phi} u``
    maps solutions to solutions with the same lateral Dirichlet data. The
    measured flux ``d_nu u + 2 (A . nu) u`` is preserved when ``grad Phi``
    also vanishes on Sigma (which ``A_1 = A_2`` on Sigma requires anyway).
    """
    if not isinstance(gauge, GaugeFunction):
        gauge = GaugeFunction(Expression(gauge, pair.n))
    gauge.validate(grid)
    if gauge.normal_derivative_max(grid) > 1e-10:
        warnings.warn(
            "grad Phi does not vanish on Sigma; the flux d_nu u + 2(A.nu)u is not gauge invariant",
            stacklevel=2,
        )
    A = pair.A + gauge.phi.grad()
    q = pair.q + gauge.phi.diff("t")
    return CoefficientPair(A, q, pair.m_bound, divfree=False, name=f"{pair.name}+gauge")
