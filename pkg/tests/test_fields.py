import math
import pickle
import warnings

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from cdlab.carleman import apply_L
from cdlab.fields import (
    CoefficientPair,
    Expression,
    GaugeFunction,
    VectorField,
    apply_gauge,
    make_divfree_field,
    max_divergence,
    ray_integral,
    ray_integral_scalar,
)
from cdlab.grid import build_grid
from cdlab.solver import dn_diff_norm, probe_basis


def test_expression_parse_and_derivative():
    f = Expression("t*x1*x2", 2)
    assert f.diff("x1").source == "t*x2"
    assert f(2.0, 3.0, 4.0) == 24.0
    with pytest.raises(ValueError):
        Expression("x3", 2)
    with pytest.raises(ValueError):
        Expression("t +* x1", 2)


def test_expression_pickles_after_evaluation():
    f = Expression("sin(x1)*t", 2)
    f(0.1, 0.2, 0.3)
    g = pickle.loads(pickle.dumps(f))
    assert g(1.0, 0.5, 0.0) == pytest.approx(math.sin(0.5))


def test_divfree_zero_and_bilinear():
    assert make_divfree_field("0").is_zero
    A = make_divfree_field("x1*x2")
    assert A[0].source == "x1" and A[1].source == "-x2"
    assert A.divergence().simplify().is_zero


def test_divfree_sampled_divergence(grid33):
    A = make_divfree_field("sin(pi*x1)*sin(pi*x2)*t")
    assert max_divergence(A, grid33) <= 1e-12


def test_divfree_three_dimensions():
    A = make_divfree_field(["x1*x2*x3", "sin(x2)*t", "x1**2*x3"], 3)
    assert A.divergence().simplify().is_zero
    with pytest.raises(ValueError):
        make_divfree_field(["x1"], 3)


@given(st.integers(0, 3), st.integers(0, 3), st.floats(-2, 2))
def test_divfree_property(a, b, c):
    A = make_divfree_field(f"{c}*x1**{a}*x2**{b}*cos(t*x1)")
    assert sp.simplify(A.divergence().expr) == 0


def test_ray_integral_examples():
    zero = VectorField.zero(2)
    assert ray_integral(zero, (1.0, 0.0), 0.3, (0.0, 0.5)) == 0.0
    const = VectorField(["2.5", "0"], 2)
    assert ray_integral(const, (1.0, 0.0), 0.3, (0.0, 0.5)) == pytest.approx(2.5, rel=1e-14)
    A = VectorField(["sin(pi*x2)", "0"], 2)
    for x2 in (0.1, 0.37, 0.8):
        assert ray_integral(A, (1.0, 0.0), 0.0, (0.0, x2)) == pytest.approx(math.sin(math.pi * x2), abs=1e-8)


def test_ray_integral_rejects_non_unit():
    with pytest.raises(ValueError):
        ray_integral(VectorField(["1", "0"], 2), (1.0, 1.0), 0.0, (0.0, 0.5))


def test_ray_integral_against_adaptive_quadrature():
    f = Expression("exp(x1)*cos(2*x2) + t*x1*x2", 2)
    w = np.array([0.6, 0.8])
    x = np.array([0.2, 0.1])
    exit_s = min((1 - x[0]) / w[0], (1 - x[1]) / w[1])
    ref = integrate.quad(lambda s: float(f(0.4, *(x + s * w))), 0.0, exit_s, epsabs=1e-13)[0]
    got = float(ray_integral_scalar(f, w, 0.4, x, upper="to_exit", step=1 / 256))
    assert got == pytest.approx(ref, abs=1e-9)
    back = min(x[0] / w[0], x[1] / w[1])
    ref_full = integrate.quad(lambda s: float(f(0.4, *(x + s * w))), -back, exit_s, epsabs=1e-13)[0]
    assert float(ray_integral_scalar(f, w, 0.4, x, upper="full_line", step=1 / 256)) == pytest.approx(ref_full, abs=1e-9)


@given(st.floats(0, 2 * math.pi), st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.0, 1.0))
def test_ray_integral_additive(angle, x1, x2, frac):
    f = Expression("x1**2 - 3*x2 + sin(x1*x2)", 2)
    w = np.array([math.cos(angle), math.sin(angle)])
    x = np.array([x1, x2])
    exit_s = float(ray_integral_scalar(Expression("1", 2), w, 0.0, x))  # chord length to the exit
    s0 = frac * exit_s
    seg = integrate.quad(lambda s: float(f(0.0, *(x + s * w))), 0.0, s0, epsabs=1e-13)[0]
    whole = float(ray_integral_scalar(f, w, 0.0, x, step=1 / 512))
    rest = float(ray_integral_scalar(f, w, 0.0, x + s0 * w, step=1 / 512))
    assert whole == pytest.approx(rest + seg, abs=1e-8)


def test_zeroth_order_coefficient_symbolic():
    # expand -sum (d_j + A_j)^2 u + q u with sympy and compare
    t, x1, x2 = sp.symbols("t x1 x2", real=True)
    A = [x2 * sp.sin(t), -x1 * sp.exp(t) + x2**2]
    q = sp.sin(t) + x1
    u = sp.Function("u")(t, x1, x2)
    X = (x1, x2)
    L = sp.diff(u, t) + q * u
    for j in range(2):
        Dj = lambda v, j=j: sp.diff(v, X[j]) + A[j] * v  # noqa: E731
        L -= Dj(Dj(u))
    pair = CoefficientPair(VectorField([str(a) for a in A], 2), Expression(str(q), 2))
    drift_part = sum(2 * pair.A[j].expr * sp.diff(u, X[j]) for j in range(2))
    expanded = sp.diff(u, t) - sp.diff(u, x1, 2) - sp.diff(u, x2, 2) - drift_part + pair.zeroth.expr * u
    assert sp.simplify(sp.expand(L - expanded)) == 0


def test_gauge_identity_and_zero():
    pair = CoefficientPair.from_strings(["x2*t", "-x1"], "sin(t)")
    g = build_grid(2, 9, 4, 1.5)
    same = apply_gauge(pair, GaugeFunction(Expression("0", 2)), g)
    assert all(sp.simplify(a.expr - b.expr) == 0 for a, b in zip(same.A, pair.A))
    with pytest.raises(ValueError):
        apply_gauge(pair, GaugeFunction(Expression("2", 2)), g)


def test_gauge_conjugation_identity(rng):
    # L_{A + grad Phi, q + Phi_t} (e^{-Phi} u) = e^{-Phi} L_{A, q} u
    pair = CoefficientPair.from_strings(["x2*t", "-x1 + 1"], "0.3 + x1*x2")
    phi = Expression("t*x1**2*(1-x1)**2*x2**2*(1-x2)**2*5", 2)
    g = build_grid(2, 9, 4, 1.5)
    gauged = apply_gauge(pair, GaugeFunction(phi), g)
    u = Expression("cos(t + 2*x1)*exp(x2)", 2)
    lhs = apply_L(gauged, Expression(sp.exp(-phi.expr) * u.expr, 2))
    rhs = Expression(sp.exp(-phi.expr) * apply_L(pair, u).expr, 2)
    pts = rng.uniform(0, 1, size=(3, 50)) * np.array([[1.5], [1], [1]])
    np.testing.assert_allclose(lhs(*pts), rhs(*pts), rtol=1e-11, atol=1e-11)


def test_gauge_warns_when_normal_derivative_nonzero():
    pair = CoefficientPair.from_strings(["0", "0"], "0")
    g = build_grid(2, 9, 4, 1.5)
    with pytest.warns(UserWarning):
        apply_gauge(pair, GaugeFunction(Expression("t*x1*(1-x1)*x2*(1-x2)", 2)), g)


def test_gauge_dn_invariance_shrinks():
    pair = CoefficientPair(make_divfree_field("0.1*sin(pi*x1)**2*sin(pi*x2)**2"), Expression("0.5", 2))
    phi = GaugeFunction(Expression("4*t*x1**2*(1-x1)**2*x2**2*(1-x2)**2", 2))
    norms = []
    for Nx, Nt in ((9, 16), (17, 32)):
        g = build_grid(2, Nx, Nt, 1.5)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            gp = apply_gauge(pair, phi, g)
        norms.append(dn_diff_norm(pair, gp, g, (1.0, 0.0), 1.0, probe_basis(g, 4), iters=5000,
                                    scheme="crank_nicolson").norm)
    assert norms[1] < norms[0]
    assert norms[1] < 1e-2


def test_admissibility_checks(grid17):
    pair = CoefficientPair(make_divfree_field("x1*x2"), Expression("t", 2), m_bound=10.0, divfree=True)
    norm = pair.check_admissible(grid17)
    assert 0 < norm <= 10.0
    bad = CoefficientPair(VectorField(["x1", "x2"], 2), Expression("0", 2), divfree=True)
    with pytest.raises(ValueError):
        bad.check_admissible(grid17)
    big = CoefficientPair(VectorField(["10*x1", "0"], 2), Expression("0", 2), m_bound=1.0)
    with pytest.raises(ValueError):
        big.check_admissible(grid17)
