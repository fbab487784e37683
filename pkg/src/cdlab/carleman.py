"""Both sides of the boundary and interior Carleman estimates for closed-form test functions.

For ``u`` with ``u(0, .) = 0`` and ``u = 0`` on Sigma the boundary estimate reads

    int_Q e^{-2 phi} (lam^2 |u|^2 + |grad u|^2) + int_Omega e^{-2 phi(T)} (lam |u(T)|^2 + |grad u(T)|^2)
      + lam int_{Sigma_+(omega)} e^{-2 phi} omega . nu |d_nu u|^2
    <= C int_Q e^{-2 phi} |L u|^2 + C lam int_{Sigma_-(omega)} e^{-2 phi} |omega . nu| |d_nu u|^2,

with ``phi = lam^2 t + lam x . omega`` (or its convexified form). The
weight has layers of width ``1/(2 lam^2)`` at ``t = 0`` and ``1/(2 lam)``
at the illuminated faces, so integrals use composite Gauss-Legendre rules on
panels graded towards those ends. The weight is applied as
``e^{-2 (phi - min phi)}``; ratios do not depend on the shift.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fields import CoefficientPair, Expression
from .go import CarlemanWeight

__all__ = [
    "CarlemanReport",
    "GROUPS",
    "apply_L",
    "carleman_sides",
    "interior_carleman_sides",
    "lambda_threshold_scan",
    "graded_rule",
    "default_suite",
    "write_carleman_csv",
]

GROUPS = ("interior", "final", "sigma_plus", "pde", "sigma_minus")
_LHS = ("interior", "final", "sigma_plus")
_RHS = ("pde", "sigma_minus")


@dataclass
class CarlemanReport:
    lam: float
    lhs: float
    rhs: float
    ratio: float
    groups: dict = field(default_factory=dict)
    test_id: str = ""

    def __post_init__(self):
        bad = {k: v for k, v in self.groups.items() if not v >= 0.0}
        if bad:
            raise ValueError(f"Carleman groups must be nonnegative, got {bad}")

    def to_row(self) -> dict:
        row = {"lambda": self.lam, "test_id": self.test_id}
        row.update({f"group{i + 1}": self.groups.get(g, 0.0) for i, g in enumerate(GROUPS)})
        row.update({"lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio})
        return row


def graded_rule(a: float, b: float, layer: float | None = None, toward: str = "a", order: int = 6, max_panel: float = 0.125):
    """Composite Gauss-Legendre nodes and weights on ``[a, b]``.

    Panels double in width away from the end ``toward`` starting at
    ``layer`` and never exceed ``max_panel * (b - a)``.
    """
    span = b - a
    cuts = [0.0]
    h = span if layer is None else min(layer, span)
    cap = max_panel * span
    while cuts[-1] < span - 1e-14:
        h = min(h, cap, span - cuts[-1])
        cuts.append(cuts[-1] + h)
        h *= 2.0
    cuts = np.asarray(cuts)
    if toward == "b":
        cuts = span - cuts[::-1]
    g, gw = np.polynomial.legendre.leggauss(order)
    lo, hi = cuts[:-1], cuts[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    nodes = a + (mid[:, None] + half[:, None] * g[None, :]).ravel()
    weights = (half[:, None] * gw[None, :]).ravel()
    return nodes, weights


def apply_L(pair: CoefficientPair, u: Expression) -> Expression:
    """``L_{A,q} u = d_t u - Lap u - 2 A . grad u + c u`` in closed form."""
    out = u.diff("t") - u.laplacian() + pair.zeroth * u
    for a in range(pair.n):
        if not pair.A[a].is_zero:
            out = out - 2 * pair.A[a] * u.diff(a)
    return out


def _phi(weight: CarlemanWeight, t, *xs):
    return weight.phi_s(t, *xs) if weight.s > 0 else weight.phi(t, *xs)


def _phi_min(weight: CarlemanWeight, T: float) -> float:
    # phi increases in t; over x take the minimum over a fine sample of the box
    n = weight.n
    g = np.linspace(0.0, 1.0, 33)
    pts = np.meshgrid(*([g] * n), indexing="ij")
    return float(np.min(_phi(weight, 0.0, *pts)))


def _axis_rules(weight: CarlemanWeight, order: int):
    rules = []
    for w in weight.omega:
        if abs(w) < 1e-12:
            rules.append(graded_rule(0.0, 1.0, None, order=order))
        else:
            rules.append(graded_rule(0.0, 1.0, 1.0 / (2.0 * weight.lam * abs(w)), "a" if w > 0 else "b", order=order))
    return rules


def _time_rule(weight: CarlemanWeight, T: float, order: int, t_range=None):
    t0, t1 = (0.0, T) if t_range is None else t_range
    return graded_rule(t0, t1, 1.0 / (2.0 * weight.lam**2), "a", order=order)


def _tensor(rules):
    pts = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    w = rules[0][1]
    for r in rules[1:]:
        w = np.multiply.outer(w, r[1])
    return pts, w


def _check_traces(u: Expression, T: float, tol: float = 1e-12):
    n = u.n
    g = np.linspace(0.0, 1.0, 17)
    tg = np.linspace(0.0, T, 17)
    worst = float(np.max(np.abs(u(0.0, *np.meshgrid(*([g] * n), indexing="ij")))))
    if worst > tol:
        raise ValueError(f"test function must vanish at t = 0 (max |u(0)| = {worst:.3e})")
    for axis in range(n):
        for side in (0.0, 1.0):
            grids = [tg] + [np.array([side]) if a == axis else g for a in range(n)]
            pts = np.meshgrid(*grids, indexing="ij")
            worst = float(np.max(np.abs(u(*pts))))
            if worst > tol:
                raise ValueError(f"test function must vanish on Sigma (max |u| = {worst:.3e} on x{axis + 1}={side:g})")


def carleman_sides(
    u: Expression,
    pair: CoefficientPair,
    weight: CarlemanWeight,
    T: float,
    *,
    order: int = 6,
    test_id: str = "",
) -> CarlemanReport:
    """All five groups of the boundary estimate for ``u`` (analytic derivatives, graded quadrature)."""
    n = pair.n
    if u.n != n or weight.n != n:
        raise ValueError("test function, pair and weight must share the dimension")
    _check_traces(u, T)
    lam = weight.lam
    shift = _phi_min(weight, T)
    grads = [u.diff(a) for a in range(n)]
    Lu = apply_L(pair, u)

    xr = _axis_rules(weight, order)
    tr = _time_rule(weight, T, order)
    (tt, *xs), wq = _tensor([tr] + xr)
    e = np.exp(-2.0 * (_phi(weight, tt, *xs) - shift))
    groups = {}
    uu = np.abs(u(tt, *xs)) ** 2
    gg = sum(np.abs(g(tt, *xs)) ** 2 for g in grads)
    groups["interior"] = float(np.sum(wq * e * (lam**2 * uu + gg)))
    groups["pde"] = float(np.sum(wq * e * np.abs(Lu(tt, *xs)) ** 2))

    xs_T, wT = _tensor(xr)
    eT = np.exp(-2.0 * (_phi(weight, T, *xs_T) - shift))
    uT = np.abs(u(T, *xs_T)) ** 2
    gT = sum(np.abs(g(T, *xs_T)) ** 2 for g in grads)
    groups["final"] = float(np.sum(wT * eT * (lam * uT + gT)))

    plus = minus = 0.0
    omega = weight.omega_array
    for axis in range(n):
        for side, sgn in ((0.0, -1.0), (1.0, 1.0)):
            on = sgn * omega[axis]  # omega . nu on this face
            if on == 0.0:
                continue
            rules = [tr] + [xr[a] for a in range(n) if a != axis]
            pts, wf = _tensor(rules)
            coords = []
            it = iter(pts[1:])
            for a in range(n):
                coords.append(np.full_like(pts[0], side) if a == axis else next(it))
            ef = np.exp(-2.0 * (_phi(weight, pts[0], *coords) - shift))
            dnu = sgn * grads[axis](pts[0], *coords)
            val = lam * abs(on) * float(np.sum(wf * ef * np.abs(dnu) ** 2))
            if on > 0:
                plus += val
            else:
                minus += val
    groups["sigma_plus"] = plus
    groups["sigma_minus"] = minus
    lhs = sum(groups[g] for g in _LHS)
    rhs = sum(groups[g] for g in _RHS)
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return CarlemanReport(lam, lhs, rhs, ratio, groups, test_id)


def interior_carleman_sides(
    u: Expression,
    pair: CoefficientPair,
    weight: CarlemanWeight,
    T: float,
    support,
    *,
    order: int = 6,
    tol: float = 1e-12,
) -> dict:
    """``lhs = int e^{-2 phi}(lam^2 |u|^2 + |grad u|^2)`` and ``rhs = int e^{-2 phi} |L u|^2``.

    ``support = ((t0, t1), (a1, b1), ..., (an, bn))`` is a box strictly inside
    ``Q`` outside of which ``u`` is taken to vanish; ``u`` must vanish on the
    faces of that box.
    """
    n = pair.n
    support = [tuple(map(float, s)) for s in support]
    if len(support) != n + 1:
        raise ValueError(f"support needs {n + 1} intervals")
    (t0, t1), boxes = support[0], support[1:]
    if not (0.0 < t0 < t1 < T) or any(not (0.0 < a < b < 1.0) for a, b in boxes):
        raise ValueError("support box must lie strictly inside Q (support too close to the boundary)")
    # u must vanish on the faces of the support box
    g = [np.linspace(a, b, 9) for a, b in support]
    for axis in range(n + 1):
        for end in support[axis]:
            grids = [np.array([end]) if a == axis else g[a] for a in range(n + 1)]
            worst = float(np.max(np.abs(u(*np.meshgrid(*grids, indexing="ij")))))
            if worst > tol:
                raise ValueError(f"test function does not vanish on the support box (max {worst:.3e})")
    lam = weight.lam
    rules = [graded_rule(t0, t1, 1.0 / (2.0 * lam**2), "a", order=order)]
    for (a, b), w in zip(boxes, weight.omega):
        if abs(w) < 1e-12:
            rules.append(graded_rule(a, b, None, order=order))
        else:
            rules.append(graded_rule(a, b, 1.0 / (2.0 * lam * abs(w)), "a" if w > 0 else "b", order=order))
    (tt, *xs), wq = _tensor(rules)
    e = np.exp(-2.0 * (_phi(weight, tt, *xs) - float(np.min(_phi(weight, tt, *xs)))))
    uu = np.abs(u(tt, *xs)) ** 2
    gg = sum(np.abs(u.diff(a)(tt, *xs)) ** 2 for a in range(n))
    lhs = float(np.sum(wq * e * (lam**2 * uu + gg)))
    rhs = float(np.sum(wq * e * np.abs(apply_L(pair, u)(tt, *xs)) ** 2))
    return {"lam": lam, "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)}


def default_suite(n: int = 2, size: int = 20, seed: int = 0) -> list[tuple[str, Expression]]:
    """Declared smooth test functions vanishing at ``t = 0`` and on Sigma.

    ``u_0 = t sin(pi x1) ... sin(pi xn)``; the others are
    ``t^p prod x_i (1 - x_i)`` times a random polynomial-trigonometric factor.
    """
    rng = np.random.default_rng(seed)
    box = "*".join(f"x{i + 1}*(1 - x{i + 1})" for i in range(n))
    out = [("sine", Expression("t*" + "*".join(f"sin(pi*x{i + 1})" for i in range(n)), n))]
    while len(out) < size:
        j = len(out)
        p = int(rng.integers(1, 3))
        terms = [f"{rng.uniform(0.5, 1.5):.3f}"]
        for i in range(n):
            terms.append(f"{rng.uniform(-1, 1):.3f}*x{i + 1}**{int(rng.integers(1, 3))}")
            terms.append(f"{rng.uniform(-0.5, 0.5):.3f}*cos({int(rng.integers(1, 4))}*pi*x{i + 1})")
        terms.append(f"{rng.uniform(-1, 1):.3f}*t")
        out.append((f"poly{j:02d}", Expression(f"t**{p}*{box}*({' + '.join(terms)})".replace("+ -", "- "), n)))
    return out


def lambda_threshold_scan(
    suite,
    pair: CoefficientPair,
    omega,
    lambdas,
    T: float,
    *,
    s: float = 0.0,
    growth: float = 0.25,
    order: int = 6,
) -> dict:
    """Empirical ``lambda_1`` and ``C`` over a suite.

    ``C(lam)`` is the largest ratio over the suite. The threshold is the
    smallest listed ``lam`` from which ``C`` never exceeds ``(1 + growth)``
    times its value there; ``C_empirical`` is the largest ``C`` from the
    threshold on. An empty or all-zero suite returns the first ``lam``.
    """
    lambdas = sorted(float(v) for v in lambdas)
    reports = []
    for lam in lambdas:
        weight = CarlemanWeight(lam, tuple(omega), s=s)
        for tid, u in suite:
            reports.append(carleman_sides(u, pair, weight, T, order=order, test_id=tid))
    C = []
    for lam in lambdas:
        vals = [r.ratio for r in reports if r.lam == lam]
        C.append(max(vals) if vals else 0.0)
    idx = len(lambdas) - 1
    for i in range(len(lambdas)):
        if all(C[j] <= (1.0 + growth) * C[i] + 1e-300 for j in range(i, len(lambdas))):
            idx = i
            break
    if not any(C):
        idx = 0
    C_emp = max(C[idx:]) if lambdas else 0.0
    return {
        "lambdas": lambdas,
        "C_by_lambda": C,
        "lambda1_empirical": lambdas[idx] if lambdas else float("nan"),
        "C_empirical": C_emp,
        "reports": reports,
    }


def write_carleman_csv(reports, path) -> Path:
    path = Path(path)
    cols = ["lambda", "test_id"] + [f"group{i + 1}" for i in range(len(GROUPS))] + ["lhs", "rhs", "ratio"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.to_row())
    return path
