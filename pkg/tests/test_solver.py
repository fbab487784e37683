import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdlab.fields import CoefficientPair, Expression, VectorField, make_divfree_field
from cdlab.grid import build_grid, discrete_norm, partition_boundary
from cdlab.solver import (
    adjoint_operator,
    apply_operator,
    dn_apply,
    dn_diff_norm,
    expand_operator,
    forward_operator,
    neumann_trace,
    probe_basis,
    solve_adjoint,
    solve_forward,
)

PAIR = CoefficientPair(make_divfree_field("0.2*sin(pi*x1)*sin(pi*x2)*(1+t)"), Expression("0.5 + 0.2*x1*t", 2))


def test_expand_operator_examples():
    out = expand_operator(CoefficientPair.from_strings(["0", "0"], "sin(t)"))
    assert out["drift"].is_zero and out["zeroth"].source == "sin(t)"
    out = expand_operator(CoefficientPair.from_strings(["1", "0"], "0"))
    assert [c.source for c in out["drift"]] == ["2", "0"]
    # -(d1 + 1)^2 = -d1^2 - 2 d1 - 1: the zeroth-order coefficient is -|A|^2
    assert float(out["zeroth"].expr) == -1.0


def test_adjoint_involution():
    pair = CoefficientPair.from_strings(["x2*t", "-x1"], "x1 + t")
    adj = adjoint_operator(pair)
    fwd = forward_operator(pair)
    # coefficients of L* are those of L_{-A, q}
    back = forward_operator(pair.with_(A=-pair.A))
    assert all((a - b).simplify().is_zero for a, b in zip(adj.drift, back.drift))
    assert (adj.zeroth - back.zeroth).simplify().is_zero
    # and L_{-(-A), q} is L again
    again = forward_operator(pair.with_(A=-(-pair.A)))
    assert all((a - b).simplify().is_zero for a, b in zip(again.drift, fwd.drift))


def test_zero_data_zero_solution(grid17):
    nb = grid17.boundary_nodes.size
    sol = solve_forward(PAIR, np.zeros((grid17.Nt + 1, nb)), grid17)
    assert not np.any(sol.u)
    adj = solve_adjoint(PAIR, np.zeros((grid17.Nt + 1, nb)), grid17)
    assert not np.any(adj.u)


def test_rejects_incompatible_data(grid17):
    with pytest.raises(ValueError):
        solve_forward(PAIR, np.ones((grid17.Nt + 1, grid17.boundary_nodes.size)), grid17)
    with pytest.raises(ValueError):
        solve_adjoint(PAIR, np.ones((grid17.Nt + 1, grid17.boundary_nodes.size)), grid17)
    with pytest.raises(ValueError):
        solve_forward(PAIR, np.zeros((grid17.Nt + 1, 3)), grid17)


def test_heat_decay_separation_of_variables():
    g = build_grid(2, 65, 128, 1.5)
    pair = CoefficientPair.from_strings(["0", "0"], "0")
    init = np.sin(np.pi * g.mesh[0]) * np.sin(np.pi * g.mesh[1])
    sol = solve_forward(pair, np.zeros((g.Nt + 1, g.boundary_nodes.size)), g, "crank_nicolson", initial=init)
    exact = np.exp(-2 * np.pi**2 * g.t)[:, None, None] * init
    assert discrete_norm(sol.u - exact, g) / discrete_norm(exact, g) <= 0.01


def _mms_error(Nx, scheme):
    g = build_grid(2, Nx, (Nx - 1) * 2, 1.5)
    u = Expression("t*sin(pi*x1)*sin(pi*x2) + t**2*x1*x2", 2)
    tt = g.t[:, None, None]
    Lu = (u.diff("t") - u.laplacian() + PAIR.zeroth * u - (PAIR.A[0] * u.diff(0) + PAIR.A[1] * u.diff(1)) * 2)
    src = np.asarray(Lu(tt, *g.mesh), dtype=float) * np.ones((g.Nt + 1,) + g.shape)
    exact = u.on_grid(g)
    sol = solve_forward(PAIR, exact, g, scheme, source=src)
    return discrete_norm(sol.u - exact, g) / discrete_norm(exact, g)


def test_manufactured_solution_second_order():
    errs = [_mms_error(Nx, "crank_nicolson") for Nx in (9, 17, 33)]
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8), (errs, rates)


def test_manufactured_solution_backward_euler_converges():
    errs = [_mms_error(Nx, "backward_euler") for Nx in (9, 17, 33)]
    assert errs[2] < errs[1] < errs[0]


def test_adjoint_manufactured_solution():
    g = build_grid(2, 33, 64, 1.5)
    v = Expression("(1.5 - t)*sin(pi*x1)*sin(pi*x2)", 2)
    op = adjoint_operator(PAIR)
    Lv = -v.diff("t") - v.laplacian() + op.zeroth * v + (op.drift[0] * v.diff(0) + op.drift[1] * v.diff(1))
    src = np.asarray(Lv(g.t[:, None, None], *g.mesh), dtype=float) * np.ones((g.Nt + 1,) + g.shape)
    sol = solve_adjoint(PAIR, np.zeros((g.Nt + 1, g.boundary_nodes.size)), g, "crank_nicolson", source=src)
    exact = v.on_grid(g)
    assert discrete_norm(sol.u - exact, g) / discrete_norm(exact, g) < 2e-3


def test_discrete_green_identity_converges():
    # <L u, v> - <u, L* v> vanishes for u(0) = 0, v(T) = 0 and zero lateral traces
    u = Expression("t*x1*(1-x1)*x2*(1-x2)*exp(x1 - t)", 2)
    v = Expression("(1.5-t)*sin(pi*x1)*sin(pi*x2)*(1 + x2*t)", 2)
    res = []
    for Nx in (9, 17, 33):
        g = build_grid(2, Nx, 2 * (Nx - 1), 1.5)
        U, V = u.on_grid(g), v.on_grid(g)
        lhs = g.inner_Q(apply_operator(PAIR, U, g), V)
        rhs = g.inner_Q(U, apply_operator(PAIR, V, g, adjoint=True))
        scale = abs(lhs)
        res.append(abs(lhs - rhs) / scale)
    rates = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(rates >= 1.0), (res, rates)


def test_neumann_trace_examples(grid17):
    zero = CoefficientPair.from_strings(["0", "0"], "0")
    g = grid17
    x1 = np.broadcast_to(g.mesh[0], (g.Nt + 1,) + g.shape)
    data = neumann_trace(x1, zero, None, g)
    coords = g.boundary_coords[data.nodes]
    left = np.isclose(coords[:, 0], 0.0)
    bottom = np.isclose(coords[:, 1], 0.0)
    np.testing.assert_allclose(data.values[:, left], -1.0, atol=1e-12)
    np.testing.assert_allclose(data.values[:, bottom], 0.0, atol=1e-12)
    sq = np.broadcast_to(g.mesh[0] ** 2, (g.Nt + 1,) + g.shape)
    right = np.isclose(g.boundary_coords[data.nodes][:, 0], 1.0)
    np.testing.assert_allclose(neumann_trace(sq, zero, None, g).values[:, right], 2.0, atol=1e-11)


def test_neumann_trace_partition_and_conormal(grid17):
    g = grid17
    p = partition_boundary(g, (1.0, 0.0), 0.5)
    pair = CoefficientPair.from_strings(["1", "0"], "0")
    u = np.ones((g.Nt + 1,) + g.shape)
    data = neumann_trace(u, pair, p, g)
    assert set(data.nodes) <= set(p.minus_nodes)
    coords = g.boundary_coords[data.nodes]
    # d_nu 1 + 2 (A . nu) 1 = -2 on the face x1 = 0
    np.testing.assert_allclose(data.values[:, np.isclose(coords[:, 0], 0.0)], -2.0, atol=1e-12)


def test_neumann_trace_refinement_order():
    pair = PAIR
    f = Expression("sin(pi*t/1.5)*cos(pi*x1)*cos(2*pi*x2)", 2)

    def trace(Nx):
        g = build_grid(2, Nx, 4 * (Nx - 1), 1.5)
        sol = solve_forward(pair, f, g, "crank_nicolson")
        d = neumann_trace(sol, pair, None)
        return g, d

    gr, dr = trace(129)
    key = {tuple(np.round(c, 9)): i for i, c in enumerate(gr.boundary_coords[dr.nodes])}
    errs = []
    for Nx in (17, 33, 65):
        g, d = trace(Nx)
        idx = [key[tuple(np.round(c, 9))] for c in g.boundary_coords[d.nodes]]
        step = (gr.Nt) // g.Nt
        diff = d.values - dr.values[::step][:, idx]
        errs.append(float(np.sqrt(np.sum(g.time_weights[:, None] * d.weights[None, :] * diff**2))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    # the coarsest pair is pre-asymptotic; the finest pair carries the observed order
    assert errs[2] < errs[1] < errs[0] and rates[-1] >= 1.5, (errs, rates)


def test_dn_apply_zero_and_deterministic(grid17, rng):
    g = grid17
    nb = g.boundary_nodes.size
    out = dn_apply(PAIR, np.zeros((g.Nt + 1, nb)), g, (1.0, 0.0), 0.5)
    assert not np.any(out.values)
    for _ in range(10):
        f = rng.standard_normal((g.Nt + 1, nb)) * np.sin(np.pi * g.t / g.T)[:, None]
        a = dn_apply(PAIR, f, g, (1.0, 0.0), 0.5).values
        b = dn_apply(PAIR, f, g, (1.0, 0.0), 0.5).values
        assert np.array_equal(a, b)


def test_dn_diff_norm_examples(grid17):
    g = grid17
    probes = probe_basis(g, 5)
    assert dn_diff_norm(PAIR, PAIR, g, (1.0, 0.0), 1.0, probes).norm == 0.0
    other = PAIR.with_(q=PAIR.q + Expression("0.4*x1", 2))
    one = probes[..., :1]
    est = dn_diff_norm(PAIR, other, g, (1.0, 0.0), 1.0, one).norm
    d1 = dn_apply(PAIR, one[..., 0], g, (1.0, 0.0), 1.0)
    d2 = dn_apply(other, one[..., 0], g, (1.0, 0.0), 1.0)
    num = math.sqrt(np.real(np.sum(g.time_weights[:, None] * d1.weights[None, :] * (d1.values - d2.values) ** 2)))
    den = discrete_norm(one[..., 0], g, "L2_Sigma")
    assert est == pytest.approx(num / den, rel=1e-8)
    with pytest.raises(ValueError):
        dn_diff_norm(PAIR, other, g, (1.0, 0.0), 1.0, probes[..., :0])


@given(st.integers(1, 5), st.integers(1, 5))
def test_dn_diff_norm_nested_and_symmetric(k1, k2):
    g = build_grid(2, 9, 8, 1.5)
    probes = probe_basis(g, 6)
    other = PAIR.with_(A=PAIR.A + make_divfree_field("0.5*x1**2*(1-x1)**2*x2**2*(1-x2)**2*t"))
    small, big = sorted((k1, k2))
    a = dn_diff_norm(PAIR, other, g, (1.0, 0.0), 1.0, probes[..., :small], iters=5000, tol=1e-13).norm
    b = dn_diff_norm(PAIR, other, g, (1.0, 0.0), 1.0, probes[..., :big + 1], iters=5000, tol=1e-13).norm
    assert b >= a * (1 - 1e-8)
    c = dn_diff_norm(other, PAIR, g, (1.0, 0.0), 1.0, probes[..., :small], iters=5000, tol=1e-13).norm
    assert c == pytest.approx(a, rel=1e-8)


def test_dn_diff_norm_linear_in_small_perturbation(grid17):
    g = grid17
    probes = probe_basis(g, 4)
    dq = Expression("x1*x2*(1 + t)", 2)
    cs = np.array([1e-4, 2e-4, 4e-4, 8e-4])
    norms = [dn_diff_norm(PAIR, PAIR.with_(q=PAIR.q + dq * float(c)), g, (1.0, 0.0), 1.0, probes, iters=2000,
                          tol=1e-13).norm for c in cs]
    slope = np.polyfit(np.log(cs), np.log(norms), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.01)


def test_probe_basis_vanishes_at_zero(grid17):
    p = probe_basis(grid17, 7, seed=3)
    assert p.shape == (grid17.Nt + 1, grid17.boundary_nodes.size, 7)
    assert not np.any(p[0])
