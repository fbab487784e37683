"""Command line entry point: ``cdlab <command> --config <file> --out <dir>``.

Each command runs the invariant suites of its config section, writes its
artifacts and ``suites.json`` to the output directory and exits with status 0
only when every enabled suite passes (1 otherwise, 2 on bad input).
"""

from __future__ import annotations

import os

# cap BLAS pools before numpy is imported
_THREADS = os.environ.get("CDLAB_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .carleman import default_suite, lambda_threshold_scan, write_carleman_csv  # noqa: E402
from .config import ScenarioConfig, load_config  # noqa: E402
from .experiments import (  # noqa: E402
    Perturbation,
    emit_report,
    fit_stability_law,
    plot_curves,
    run_family,
    trend_summary,
)
from .fields import VectorField, apply_gauge  # noqa: E402
from .go import CarlemanWeight, build_Bg, cutoff_eta, build_go_solution, transport_residual  # noqa: E402
from .grid import build_grid, export_partition_csv, partition_boundary  # noqa: E402
from .reconstruction import FourierLattice, reconstruct_A, reconstruct_qtilde  # noqa: E402
from .solver import dn_diff_norm, neumann_trace, probe_basis, solve_forward, worker_count  # noqa: E402

logger = logging.getLogger("cdlab")

COMMANDS = ("forward", "dnmap", "go-check", "carleman-check", "reconstruct", "stability-curve")


def _suite(name: str, passed: bool, **values) -> dict:
    return {"suite": name, "passed": bool(passed), **values}


def _json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")


def _slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def cmd_forward(cfg: ScenarioConfig, out: Path) -> list[dict]:
    grid = cfg.grid.build()
    p1, p2 = cfg.fields.pairs(grid.n)
    exp = cfg.experiment
    probes = probe_basis(grid, exp.probe_size, exp.probe_seed)
    partition = partition_boundary(grid, exp.omega0, exp.eps)
    export_partition_csv(grid, partition, out / "partition.csv")
    zero = solve_forward(p1, np.zeros(probes.shape[:2]), grid, exp.scheme)
    suites = [_suite("zero_data_zero_solution", not np.any(zero.u), max_abs=float(np.max(np.abs(zero.u))))]
    doc = {}
    for pair in (p1, p2):
        sol = solve_forward(pair, probes, grid, exp.scheme)
        flux = neumann_trace(sol, pair, partition)
        scale = float(np.max(np.abs(sol.u)))
        doc[pair.name] = {"residual_norm": sol.residual_norm, "max_abs_u": scale,
                          "max_abs_flux": float(np.max(np.abs(flux.values)))}
        suites.append(_suite(f"solver_residual_{pair.name}", sol.residual_norm <= 1e-8 * max(scale, 1.0),
                             residual_norm=sol.residual_norm))
    _json(out / "forward.json", doc)
    return suites


def cmd_dnmap(cfg: ScenarioConfig, out: Path) -> list[dict]:
    grid = cfg.grid.build()
    p1, p2 = cfg.fields.pairs(grid.n)
    exp = cfg.experiment
    probes = probe_basis(grid, exp.probe_size, exp.probe_seed)
    args = (grid, exp.omega0, exp.eps, probes, exp.power_iters, exp.power_tol, exp.scheme)
    d12 = dn_diff_norm(p1, p2, *args)
    d21 = dn_diff_norm(p2, p1, *args)
    d11 = dn_diff_norm(p1, p1, *args)
    doc = {"pair1_pair2": d12.to_record(), "pair2_pair1": d21.to_record(), "pair1_pair1": d11.to_record()}
    sym = abs(d12.norm - d21.norm) / max(d12.norm, 1e-300)
    suites = [
        _suite("identical_pairs_zero", d11.norm == 0.0, dn_norm=d11.norm),
        _suite("symmetry", sym <= 1e-8 or d12.norm == d21.norm, rel_diff=sym),
        _suite("power_iteration_converged", d12.converged and d21.converged),
    ]
    gauge = cfg.fields.gauge_function(grid.n)
    if gauge is not None:
        gauged = apply_gauge(p1, gauge, grid)
        dg = dn_diff_norm(p1, gauged, *args)
        coarse = build_grid(grid.n, (grid.Nx + 1) // 2, max(2, grid.Nt // 2), grid.T)
        dg_coarse = dn_diff_norm(p1, gauged, coarse, exp.omega0, exp.eps,
                                 probe_basis(coarse, exp.probe_size, exp.probe_seed), exp.power_iters, exp.power_tol,
                                 exp.scheme)
        doc["gauge"] = {"fine": dg.to_record(), "coarse": dg_coarse.to_record()}
        suites.append(_suite("gauge_shrinks_under_refinement", dg.norm < dg_coarse.norm,
                             fine=dg.norm, coarse=dg_coarse.norm))
    _json(out / "dnmap.json", doc)
    return suites


def cmd_go_check(cfg: ScenarioConfig, out: Path) -> list[dict]:
    go = cfg.go
    if not go.enabled:
        return []
    n = cfg.grid.n
    p1, _ = cfg.fields.pairs(n)
    zero = VectorField.zero(n)
    res = []
    for Nx in go.transport_Nx:
        g = build_grid(n, Nx, go.transport_Nt, cfg.grid.T)
        B = build_Bg(p1.A, zero, go.omega, go.tau, go.xi, go.delta, g)
        res.append(transport_residual(B, p1.A, go.omega, g))
    hs = [1.0 / (Nx - 1) for Nx in go.transport_Nx]
    order = _slope(hs, res) if all(r > 0 for r in res) else math.inf
    grid = cfg.grid.build()
    B = build_Bg(p1.A, zero, go.omega, go.tau, go.xi, go.delta, grid)
    l2, h1 = [], []
    for lam in go.lambdas:
        sol = build_go_solution(p1, B, CarlemanWeight(lam, tuple(go.omega)), "growing", grid, go.scheme,
                                freq=(go.tau, np.asarray(go.xi, float)), delta=go.delta)
        l2.append(float(sol.remainder_norm(0)))
        h1.append(float(sol.remainder_norm(1)))
    s0, s1 = _slope(go.lambdas, l2), _slope(go.lambdas, h1)
    with (out / "remainder.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "delta", "tau", "abs_xi", "norm_R_L2", "norm_R_H1", "transport_residual"])
        tr = transport_residual(B, p1.A, go.omega, grid)
        r = float(np.linalg.norm(go.xi))
        for lam, a, b in zip(go.lambdas, l2, h1):
            w.writerow([repr(float(v)) for v in (lam, go.delta, go.tau, r, a, b, tr)])
    plot_curves(go.lambdas, {"L2": l2, "L2(H1)": h1}, "lambda", out / "remainder_decay.svg")
    _json(out / "go.json", {"transport": {"Nx": go.transport_Nx, "residual": res, "order": order},
                            "remainder": {"lambdas": go.lambdas, "l2": l2, "h1": h1, "l2_slope": s0, "h1_slope": s1}})
    return [
        _suite("transport_order", order >= go.min_transport_order, order=order),
        _suite("remainder_l2_slope", s0 <= go.max_l2_slope, slope=s0),
        _suite("remainder_h1_slope", s1 <= go.max_h1_slope, slope=s1),
    ]


def cmd_carleman_check(cfg: ScenarioConfig, out: Path) -> list[dict]:
    car = cfg.carleman
    if not car.enabled:
        return []
    n = cfg.grid.n
    p1, _ = cfg.fields.pairs(n)
    suite = default_suite(n, car.suite_size, car.seed)
    scan = lambda_threshold_scan(suite, p1, car.omega, car.lambdas, cfg.grid.T, s=car.s, growth=car.growth,
                                 order=car.order)
    write_carleman_csv(scan["reports"], out / "carleman.csv")
    plot_curves(scan["lambdas"], {"max lhs/rhs": scan["C_by_lambda"]}, "lambda", out / "carleman_ratio.svg")
    lams, C = scan["lambdas"], scan["C_by_lambda"]
    lam1 = scan["lambda1_empirical"]
    # the bound must not grow by more than `growth` when lambda is multiplied by four
    worst = 0.0
    for i, lam in enumerate(lams):
        if lam < lam1:
            continue
        for j in range(i + 1, len(lams)):
            if lams[j] <= 4.0 * lam * (1 + 1e-12) and C[i] > 0:
                worst = max(worst, C[j] / C[i] - 1.0)
    doc = {k: v for k, v in scan.items() if k != "reports"}
    doc["worst_growth"] = worst
    _json(out / "carleman.json", doc)
    return [
        _suite("carleman_bounded", math.isfinite(scan["C_empirical"]), C_empirical=scan["C_empirical"], lambda1=lam1),
        _suite("carleman_no_degradation", worst <= car.growth, worst_growth=worst),
    ]


def _write_field_csv(path: Path, grid, columns: dict) -> None:
    mesh = [np.broadcast_to(grid.t.reshape((-1,) + (1,) * grid.n), (grid.Nt + 1,) + grid.shape)]
    mesh += [np.broadcast_to(m, (grid.Nt + 1,) + grid.shape) for m in grid.mesh]
    names = ["t"] + [f"x{i + 1}" for i in range(grid.n)] + list(columns)
    cols = [m.ravel() for m in mesh] + [np.asarray(v).ravel() for v in columns.values()]
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.10g")


def cmd_reconstruct(cfg: ScenarioConfig, out: Path) -> list[dict]:
    rec = cfg.reconstruction
    if not rec.enabled:
        return []
    grid = cfg.grid.build()
    p1, p2 = cfg.fields.pairs(grid.n)
    lattice = FourierLattice(grid.T, grid.n, rec.K, rec.M)
    opts = dict(lam=rec.lam, delta=rec.delta, probes=rec.probes, amplitudes=rec.amplitudes, boundary=rec.boundary,
                eps=rec.eps, omega0=rec.omega0, scheme=rec.scheme, noise=rec.noise, seed=rec.seed, chunk=rec.chunk)
    truth = p1.A - p2.A
    resA = reconstruct_A(p1, p2, lattice, grid, mode=rec.mode, truth=truth, **opts)
    eta2 = cutoff_eta(rec.delta, grid.t, 0, grid.T).reshape((-1,) + (1,) * grid.n) ** 2
    cols = {f"rec_A{i + 1}": resA.field[i] for i in range(grid.n)}
    cols.update({f"true_A{i + 1}": eta2 * truth[i].on_grid(grid) for i in range(grid.n)})
    report = {"A": resA.to_report()}
    suites = []
    if truth.is_zero:
        suites.append(_suite("zero_difference_floor", not np.any(resA.field), max_abs=float(np.max(np.abs(resA.field)))))
    else:
        suites.append(_suite("A_relative_error", resA.report["rel_l2_error"] <= rec.max_rel_error,
                             rel_l2_error=resA.report["rel_l2_error"]))
    if rec.recover_q:
        qt_truth = p1.zeroth - p2.zeroth
        resQ = reconstruct_qtilde(p1, p2, lattice, grid, A_coefficients=resA.coefficients, truth=qt_truth, **opts)
        quad = (p1.A.norm_sq() - p2.A.norm_sq()).on_grid(grid)
        cols["rec_q"] = resQ.field + eta2 * quad
        cols["true_q"] = eta2 * (p1.q - p2.q).on_grid(grid)
        report["qtilde"] = resQ.to_report()
        if qt_truth.is_zero:
            suites.append(_suite("zero_qtilde_floor", float(np.max(np.abs(resQ.field))) <= 1e-12,
                                 max_abs=float(np.max(np.abs(resQ.field)))))
        else:
            suites.append(_suite("qtilde_relative_error", resQ.report["rel_l2_error"] <= rec.max_rel_error,
                                 rel_l2_error=resQ.report["rel_l2_error"]))
    _write_field_csv(out / "reconstruction.csv", grid, cols)
    _json(out / "reconstruction.json", report)
    return suites


def cmd_stability_curve(cfg: ScenarioConfig, out: Path) -> list[dict]:
    exp = cfg.experiment
    if not exp.enabled:
        return []
    grid = cfg.grid.build()
    p1, _ = cfg.fields.pairs(grid.n)
    dA, dq = cfg.fields.perturbation_fields(grid.n)
    records = run_family(p1, Perturbation(dA, dq), exp.scales, grid, cfg.reconstruction, exp)
    fits, failures = {}, {}
    for law in exp.laws:
        try:
            fits[law] = fit_stability_law(records, law)
        except ValueError as exc:
            failures[law] = str(exc)
    summary = trend_summary(records, fits)
    emit_report(records, {**fits, "trend": summary, "fit_failures": failures}, out)
    suites = [_suite("monotone_trend", summary["rank_correlation"] >= exp.min_rank_correlation,
                     rank_correlation=summary["rank_correlation"])]
    if "double_log_residual_ratio" in summary:
        ratio = summary["double_log_residual_ratio"]
        suites.append(_suite("double_log_fit", ratio <= exp.max_residual_ratio, residual_ratio=ratio))
    return suites


HANDLERS = {
    "forward": cmd_forward,
    "dnmap": cmd_dnmap,
    "go-check": cmd_go_check,
    "carleman-check": cmd_carleman_check,
    "reconstruct": cmd_reconstruct,
    "stability-curve": cmd_stability_curve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdlab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON scenario file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        # surface bad grids and unparsable fields as input errors, before any work
        cfg.grid.build()
        cfg.fields.pairs(cfg.grid.n)
        cfg.fields.gauge_function(cfg.grid.n)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except (OSError, ValueError) as exc:
        print(f"cdlab: {exc}", file=sys.stderr)
        return 2
    started = time.perf_counter()
    suites = HANDLERS[args.command](cfg, out)
    ok = all(s["passed"] for s in suites)
    _json(out / "suites.json", {"command": args.command, "passed": ok, "suites": suites, "workers": worker_count(),
                                "runtime_s": time.perf_counter() - started})
    for s in suites:
        print(f"{'PASS' if s['passed'] else 'FAIL'} {s['suite']}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
