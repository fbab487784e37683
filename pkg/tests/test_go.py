import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdlab.fields import CoefficientPair, Expression, VectorField, make_divfree_field
from cdlab.go import (
    CarlemanWeight,
    build_Bd,
    build_Bg,
    build_go_solution,
    build_split_amplitudes,
    conjugated_operator,
    cutoff_constants,
    cutoff_eta,
    lambda_sobolev_norm,
    shifted_index_check,
    split_exponent,
    transport_residual,
)
from cdlab.grid import build_grid, discrete_norm

ZERO = VectorField(["0", "0"], 2)
A_SMOOTH = VectorField(["0.3*sin(pi*x2)*(1+t) + 0.2*x1", "0.1*x1*x2 - 0.2*cos(t)"], 2)
D_SMOOTH = make_divfree_field("0.2*x1**2*(1-x1)**2*x2**2*(1-x2)**2*(2+sin(t))")


def test_weight_and_shift_point():
    w = CarlemanWeight(4.0, (0.6, 0.8))
    assert w.phi(0.5, 1.0, 0.0) == pytest.approx(16 * 0.5 + 4 * 0.6)
    assert w.phi_s(0.5, 1.0, 0.0) == w.phi(0.5, 1.0, 0.0)
    ws = CarlemanWeight(4.0, (0.6, 0.8), s=1.0)
    r = 0.6 * (1.0 + ws.x0[0]) + 0.8 * ws.x0[1]
    assert ws.phi_s(0.5, 1.0, 0.0) == pytest.approx(10.4 - 0.5 * r**2)
    with pytest.raises(ValueError):
        CarlemanWeight(0.0, (1.0, 0.0))
    with pytest.raises(ValueError):
        CarlemanWeight(1.0, (3.0, 4.0))
    with pytest.raises(ValueError):
        CarlemanWeight(1.0, (1.0, 0.0), x0=(-2.0, 0.0))
    with pytest.raises(ValueError):
        CarlemanWeight(1.0, (1.0, 0.0), s=-1.0)


def test_cutoff_examples():
    T = 1.5
    assert cutoff_eta(0.1, 0.5 * T, T=T) == 1.0
    assert cutoff_eta(0.1, 0.05, T=T) == 0.0
    t = np.linspace(0, T, 3001)
    eta = cutoff_eta(0.2, t, T=T)
    assert np.all(eta[(t >= 0.4) & (t <= T - 0.4)] == 1.0)
    assert np.all(eta[(t <= 0.2) | (t >= T - 0.2)] == 0.0)
    assert np.all((eta >= 0) & (eta <= 1))
    for bad in (0.0, T / 4, -0.1):
        with pytest.raises(ValueError):
            cutoff_eta(bad, 0.5, T=T)
    with pytest.raises(ValueError):
        cutoff_eta(0.1, 0.5, k=4, T=T)


def test_cutoff_derivative_scaling():
    T = 1.5
    t = np.linspace(0, T, 200001)
    peaks = [np.max(np.abs(cutoff_eta(d, t, 1, T))) * d for d in (0.1, 0.05, 0.025)]
    assert max(peaks) / min(peaks) <= 1.2
    C = cutoff_constants()
    for k in (1, 2, 3):
        for d in (0.1, 0.05):
            assert np.max(np.abs(cutoff_eta(d, t, k, T))) <= C[k] * d ** (-k) * (1 + 1e-3)


def test_cutoff_derivative_matches_finite_difference():
    T, d = 1.5, 0.2
    t = np.linspace(0.25, 0.45, 41)
    h = 1e-6
    for k in (1, 2, 3):
        fd = (cutoff_eta(d, t + h, k - 1, T) - cutoff_eta(d, t - h, k - 1, T)) / (2 * h)
        np.testing.assert_allclose(cutoff_eta(d, t, k, T), fd, atol=1e-4 * d ** (-k))


def test_Bd_examples(grid17):
    g = grid17
    eta = cutoff_eta(0.3, g.t, T=g.T)[:, None, None]
    np.testing.assert_allclose(build_Bd(ZERO, (1, 0), 0.3, g), np.broadcast_to(eta, (g.Nt + 1,) + g.shape))
    c = 0.7
    B = build_Bd(VectorField([str(c), "0"], 2), (1, 0), 0.3, g)
    np.testing.assert_allclose(B, eta * np.exp(c * (1 - g.mesh[0])), rtol=1e-10)
    with pytest.raises(ValueError):
        build_Bd(ZERO, (1, 1), 0.3, g)


def test_Bg_examples(grid17):
    g = grid17
    eta = cutoff_eta(0.3, g.t, T=g.T)[:, None, None]
    xi = np.array([0.0, 2 * np.pi])
    B = build_Bg(ZERO, ZERO, (1, 0), 1.0, xi, 0.3, g)
    E = np.exp(-1j * (g.t[:, None, None] * 1.0 + xi[1] * g.mesh[1]))
    np.testing.assert_allclose(B, -1j * 2 * np.pi * eta * E, atol=1e-12)
    np.testing.assert_allclose(np.abs(B), 2 * np.pi * np.broadcast_to(eta, B.shape), atol=1e-12)
    with pytest.raises(ValueError):
        build_Bg(ZERO, ZERO, (1, 0), 1.0, (1.0, 1.0), 0.3, g)
    with pytest.raises(ValueError):
        build_Bg(ZERO, ZERO, (1, 0), 1.0, (0.0, 0.0), 0.3, g)


def _transport_orders(build, A):
    res = []
    for Nx in (17, 33, 65):
        g = build_grid(2, Nx, 4, 1.5)
        res.append(transport_residual(build(g), A, (1, 0), g))
    return np.log2(np.array(res[:-1]) / np.array(res[1:])), res


def test_Bd_transport_second_order():
    rates, res = _transport_orders(lambda g: build_Bd(A_SMOOTH, (1, 0), 0.3, g), A_SMOOTH)
    assert np.all(rates > 1.8), (res, rates)


def test_Bg_transport_second_order():
    rates, res = _transport_orders(lambda g: build_Bg(A_SMOOTH, D_SMOOTH, (1, 0), 1.0, (0, 3.0), 0.3, g), A_SMOOTH)
    assert np.all(rates > 1.8), (res, rates)


def test_split_amplitudes_product_and_exponent(grid17):
    g = grid17
    lam, tau, xi = 8.0, 1.0, np.array([0.0, 2.0])
    s = split_exponent(lam, tau, xi)
    assert s * s == pytest.approx(lam**2 + 1.0 - 0.5j)
    grow, decay, s2 = build_split_amplitudes(ZERO, ZERO, (1, 0), tau, xi, 0.3, lam, g)
    assert s2 == s
    eta = cutoff_eta(0.3, g.t, T=g.T)[:, None, None]
    phase = g.t[:, None, None] * tau + xi[1] * g.mesh[1]
    expected = eta**2 * np.exp(-1j * phase) * np.exp(2j * s.imag * (g.mesh[0] - 0.5))
    np.testing.assert_allclose(grow * np.conj(decay), expected, atol=1e-12)


def test_split_amplitude_solves_conjugated_heat_equation():
    # away from the cutoff ramps, the growing split amplitude with A = 0 is an exact solution
    lam, tau, xi = 6.0, 2.0, np.array([0.0, 3.0])
    s = split_exponent(lam, tau, xi)
    w = np.exp(-0.5j * (2.0 * 0.7 + 3.0 * 0.4) + (s - lam) * (0.3 - 0.5))
    # d_t w - Lap w - 2 lam d_1 w for w = exp(-i(t tau + x xi)/2 + (s - lam)(x1 - 1/2))
    symbol = -0.5j * tau - ((s - lam) ** 2 - 0.25 * xi @ xi) - 2 * lam * (s - lam)
    assert abs(symbol * w) < 1e-12


def test_decaying_remainder_decays_for_pure_cutoff():
    g = build_grid(2, 33, 64, 1.5)
    pair = CoefficientPair.from_strings(["0", "0"], "0")
    B = build_Bd(ZERO, (1, 0), 0.3, g)
    rel = []
    for lam in (4.0, 8.0, 16.0, 32.0):
        sol = build_go_solution(pair, B, CarlemanWeight(lam, (1, 0)), "decaying", g)
        assert np.max(np.abs(sol.w[-1])) < 1e-12
        rel.append(sol.remainder_norm(0) / discrete_norm(B, g))
    assert all(b < a for a, b in zip(rel, rel[1:])), rel
    assert rel[-1] < 0.05


def test_growing_solution_initial_state_and_delta_sensitivity():
    g = build_grid(2, 33, 64, 1.5)
    pair = CoefficientPair.from_strings(["0", "0"], "0.5")
    norms = {}
    for d in (0.3, 0.15):
        B = build_Bg(ZERO, ZERO, (1, 0), 1.0, (0, 1.0), d, g)
        sol = build_go_solution(pair, B, CarlemanWeight(16.0, (1, 0)), "growing", g, freq=(1.0, (0, 1.0)), delta=d)
        assert np.max(np.abs(sol.w[0])) < 1e-12
        assert np.max(np.abs(g.boundary_values(sol.R))) < 1e-12
        norms[d] = sol.remainder_norm(0)
    assert norms[0.15] / norms[0.3] <= 8 * 1.2


def test_go_solution_guards(grid17):
    g = grid17
    pair = CoefficientPair.from_strings(["0", "0"], "0")
    B = build_Bd(ZERO, (1, 0), 0.3, g)
    with pytest.raises(ValueError):
        build_go_solution(pair, B, CarlemanWeight(0.5, (1, 0)), "growing", g)
    with pytest.raises(ValueError):
        build_go_solution(pair, B, CarlemanWeight(4.0, (1, 0), s=1.0), "growing", g)
    with pytest.raises(ValueError):
        build_go_solution(pair, np.ones_like(B), CarlemanWeight(4.0, (1, 0)), "growing", g)
    with pytest.raises(ValueError):
        build_go_solution(pair, B, CarlemanWeight(4.0, (0, 1)), "growing", g, freq=(1.0, (0.0, 1.0)))
    with pytest.raises(ValueError):
        conjugated_operator(pair, CarlemanWeight(4.0, (1, 0)), "sideways")


def test_conjugated_variable_stays_bounded():
    # e^{lam^2 T} would overflow at lam = 64; the conjugated variable never forms it
    g = build_grid(2, 17, 32, 1.5)
    pair = CoefficientPair.from_strings(["0", "0"], "0.5")
    B = build_Bg(ZERO, ZERO, (1, 0), 1.0, (0, 1.0), 0.3, g)
    sol = build_go_solution(pair, B, CarlemanWeight(64.0, (1, 0)), "growing", g)
    assert np.all(np.isfinite(sol.w)) and np.max(np.abs(sol.w)) < 10.0


BUMP = Expression(
    "*".join(
        f"Piecewise((({v}-{a})**4*({b}-{v})**4, ({v}>{a})&({v}<{b})), (0, True))"
        for v, a, b in [("x1", 0.25, 0.75), ("x2", 0.25, 0.75), ("t", 0.3, 1.2)]
    ),
    2,
)


def test_shifted_index_examples(grid33):
    g = grid33
    pair = CoefficientPair.from_strings(["0.2*x2", "0"], "0.5")
    assert shifted_index_check(pair, CarlemanWeight(8.0, (1, 0)), Expression(0, 2), g) == {"lhs": 0.0, "rhs": 0.0}
    ratios = []
    for lam in (8.0, 16.0, 32.0):
        r = shifted_index_check(pair, CarlemanWeight(lam, (1, 0)), BUMP, g)
        ratios.append(r["lhs"] / r["rhs"])
    assert max(ratios) <= 1.0 and min(ratios) > 0
    with pytest.raises(ValueError):
        shifted_index_check(pair, CarlemanWeight(8.0, (1, 0)), Expression("x1*(1-x1)*t", 2), g)


@given(st.floats(1.0, 64.0))
def test_lambda_sobolev_norm_sanity(lam):
    g = build_grid(2, 17, 8, 1.5)
    v = BUMP.on_grid(g)
    l2 = discrete_norm(v, g)
    assert lambda_sobolev_norm(v, g, lam, 0.0) == pytest.approx(l2, rel=1e-10)
    assert lambda_sobolev_norm(v, g, lam, -1.0) <= l2 / lam * (1 + 1e-12)
