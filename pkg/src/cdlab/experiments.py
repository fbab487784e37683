"""Perturbation families, stability-law fits and report files.

A family fixes a known pair ``(A1, q1)`` and a direction ``(dA, dq)``; member
``c`` is the hidden pair ``(A1 + c dA, q1 + c dq)``. For each member the
partial DN difference norm is measured and the difference is reconstructed
from boundary data; the records are then fitted against the
log-log / log-log-log stability laws.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .config import ExperimentConfig, ReconstructionConfig
from .fields import CoefficientPair, Expression, VectorField, max_divergence
from .go import cutoff_eta
from .grid import SpaceTimeGrid, discrete_norm
from .reconstruction import (
    FourierLattice,
    StabilityParams,
    radius_from_dn_norm,
    reconstruct_A,
    reconstruct_qtilde,
)
from .solver import dn_diff_norm, probe_basis, worker_count

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentRecord",
    "Perturbation",
    "HypothesisViolation",
    "run_family",
    "LawFit",
    "LAWS",
    "law_model",
    "fit_stability_law",
    "trend_summary",
    "emit_report",
    "CSV_COLUMNS",
    "plot_curves",
]


class HypothesisViolation(ValueError):
    """A perturbation breaks a hypothesis of the stability estimate."""


@dataclass
class ExperimentRecord:
    scenario: str
    eps_perturb: float
    dn_norm: float
    errA_L2: float
    errQ_L2: float
    params: StabilityParams
    runtime_s: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.dn_norm >= 0.0:
            raise ValueError(f"dn_norm must be >= 0, got {self.dn_norm}")
        if self.eps_perturb == 0.0 and self.errA_L2 != 0.0:
            raise ValueError("a zero perturbation must give errA_L2 = 0")


@dataclass
class Perturbation:
    """Direction ``(dA, dq)`` of a family, checked against the hypotheses of the estimate."""

    dA: VectorField
    dq: Expression
    tol_trace: float = 1e-10
    tol_div: float = 1e-10

    def validate(self, grid: SpaceTimeGrid) -> Perturbation:
        trace = np.max(np.abs(np.stack([grid.boundary_values(c.on_grid(grid)) for c in self.dA])))
        if trace > self.tol_trace:
            raise HypothesisViolation(
                f"A1|_Sigma = A2|_Sigma violated: max |dA| on the lateral boundary is {trace:.3e}"
            )
        div = max_divergence(self.dA, grid)
        if div > self.tol_div:
            raise HypothesisViolation(f"div A1 = div A2 violated: max |div dA| = {div:.3e}")
        return self

    def member(self, base: CoefficientPair, c: float) -> CoefficientPair:
        if c == 0.0:
            return base
        return base.with_(A=base.A + self.dA.scale(c), q=base.q + self.dq * c, name=f"member({c:g})")


def _params(dn: float, rec: ReconstructionConfig) -> StabilityParams:
    R = radius_from_dn_norm(dn) if 0.0 < dn < math.exp(-1.0) else float("nan")
    return StabilityParams(R=R, delta=rec.delta, lam=rec.lam)


def _member(args) -> ExperimentRecord:
    base, pert, c, grid, lattice, rec, exp = args
    started = time.perf_counter()
    pair2 = pert.member(base, c)
    probes = probe_basis(grid, exp.probe_size, exp.probe_seed)
    dn = dn_diff_norm(base, pair2, grid, exp.omega0, exp.eps, probes, exp.power_iters, exp.power_tol, exp.scheme).norm
    truth = base.A - pair2.A
    opts = dict(lam=rec.lam, delta=rec.delta, probes=rec.probes, amplitudes=rec.amplitudes, boundary=rec.boundary,
                eps=rec.eps, omega0=rec.omega0, scheme=rec.scheme, noise=rec.noise, seed=rec.seed, chunk=rec.chunk)
    resA = reconstruct_A(base, pair2, lattice, grid, mode=rec.mode, truth=truth, **opts)
    errA = 0.0 if c == 0.0 else math.sqrt(sum(discrete_norm(f, grid) ** 2 for f in resA.field))
    extra = {
        "true_A_L2": resA.report["truth_l2"],
        "recon_rel_error": resA.report["rel_l2_error"] if c != 0.0 else 0.0,
    }
    errQ = float("nan")
    if rec.recover_q:
        resQ = reconstruct_qtilde(base, pair2, lattice, grid, A_coefficients=resA.coefficients, **opts)
        eta2 = cutoff_eta(rec.delta, grid.t, 0, grid.T).reshape((-1,) + (1,) * grid.n) ** 2
        # q1 - q2 = qt + div(A1 - A2) + |A1|^2 - |A2|^2; the divergence term vanishes by hypothesis
        quad = (base.A.norm_sq() - pair2.A.norm_sq()).on_grid(grid)
        q = resQ.field + eta2 * quad
        errQ = discrete_norm(q, grid) if c != 0.0 else 0.0
        extra["true_Q_L2"] = discrete_norm(eta2 * (base.q - pair2.q).on_grid(grid), grid)
    return ExperimentRecord(exp.scenario, float(c), dn, errA, errQ, _params(dn, rec), time.perf_counter() - started, extra)


def run_family(
    base: CoefficientPair,
    perturbation: Perturbation,
    scales,
    grid: SpaceTimeGrid,
    rec: ReconstructionConfig | None = None,
    exp: ExperimentConfig | None = None,
) -> list[ExperimentRecord]:
    """One record per scale; members run in a process pool of ``CDLAB_THREADS`` workers."""
    rec = ReconstructionConfig() if rec is None else rec
    exp = ExperimentConfig() if exp is None else exp
    perturbation.validate(grid)
    lattice = FourierLattice(grid.T, grid.n, rec.K, rec.M)
    jobs = [(base, perturbation, float(c), grid, lattice, rec, exp) for c in scales]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_member, jobs))
    else:
        records = [_member(j) for j in jobs]
    for r in records:
        logger.info("scale %g: dn=%.4e errA=%.4e", r.eps_perturb, r.dn_norm, r.errA_L2)
    return records


# stability laws in terms of d = dn_norm; ``log_C`` is the log of the prefactor
LAWS = {
    "power": ("log_C", "a"),
    "double_log": ("log_C", "alpha1", "alpha2"),
    "triple_log": ("log_C", "beta1", "beta2"),
}
_TARGET = {"power": "errA_L2", "double_log": "errA_L2", "triple_log": "errQ_L2"}


def _slow_variable(d: np.ndarray, law: str) -> np.ndarray:
    ell = np.log(np.abs(np.log(d)))
    return ell if law == "double_log" else np.log(ell)


def law_model(law: str, coeffs, d) -> np.ndarray:
    """``C d^a``, ``C (d^a1 + (log|log d|)^-a2)`` or ``C (d^b1 + (log log|log d|)^-b2)``."""
    d = np.asarray(d, dtype=float)
    c = np.asarray(coeffs, dtype=float)
    if law == "power":
        return np.exp(c[0]) * d ** c[1]
    return np.exp(c[0]) * (d ** c[1] + _slow_variable(d, law) ** (-c[2]))


def _log_model(law: str, c, d) -> np.ndarray:
    logd = np.log(d)
    if law == "power":
        return c[0] + c[1] * logd
    return c[0] + np.logaddexp(c[1] * logd, -c[2] * np.log(_slow_variable(d, law)))


@dataclass
class LawFit:
    law: str
    target: str
    coefficients: dict
    residual: float  # root mean square of log residuals
    stderr: dict
    n_points: int
    success: bool

    def band(self, name: str, z: float = 1.96) -> tuple[float, float]:
        v, s = self.coefficients[name], self.stderr.get(name, float("nan"))
        return v - z * s, v + z * s

    def to_dict(self) -> dict:
        return {
            "law": self.law,
            "target": self.target,
            "coefficients": self.coefficients,
            "stderr": self.stderr,
            "band95": {k: list(self.band(k)) for k in self.coefficients},
            "residual": self.residual,
            "n_points": self.n_points,
            "success": self.success,
        }


def _points(records, target: str):
    d = np.array([r.dn_norm for r in records], dtype=float)
    e = np.array([getattr(r, target) for r in records], dtype=float)
    keep = (d > 0) & np.isfinite(e) & (e > 0)
    return d[keep], e[keep]


def fit_stability_law(records, law: str = "double_log", target: str | None = None) -> LawFit:
    """Least-squares fit of log(err) against the log of the law; several starts, best kept."""
    if law not in LAWS:
        raise ValueError(f"law must be one of {sorted(LAWS)}, got {law!r}")
    target = _TARGET[law] if target is None else target
    d, e = _points(records, target)
    if np.unique(d).size < 4:
        raise ValueError(f"need >= 4 records with distinct dn_norm > 0, got {np.unique(d).size}")
    if np.log(d.max() / d.min()) < 1e-6:
        raise ValueError("insufficient spread in dn_norm")
    if law != "power":
        limit = math.exp(-1.0) if law == "double_log" else math.exp(-math.e)
        if d.max() >= limit:
            raise ValueError(f"{law} law needs dn_norm < {limit:.4g}, got {d.max():.4g}")
    y = np.log(e)
    names = LAWS[law]
    if law == "power":
        slope, icpt = np.polyfit(np.log(d), y, 1)
        starts = [np.array([icpt, slope])]
        lower, upper = [-np.inf, -np.inf], [np.inf, np.inf]
    else:
        starts = [np.array([y.mean(), a1, a2]) for a1 in (0.25, 0.5, 1.0, 2.0) for a2 in (0.5, 1.0, 2.0, 4.0, 8.0)]
        lower, upper = [-np.inf, 0.0, 0.0], [np.inf, 20.0, 200.0]
    best = None
    for x0 in starts:
        res = optimize.least_squares(
            lambda c: _log_model(law, c, d) - y, x0, bounds=(lower, upper), xtol=1e-15, ftol=1e-15, gtol=1e-15,
            max_nfev=5000,
        )
        if best is None or res.cost < best.cost:
            best = res
    r = best.fun
    dof = r.size - len(names)
    stderr = {k: float("nan") for k in names}
    if dof > 0:
        JtJ = best.jac.T @ best.jac
        try:
            cov = np.linalg.inv(JtJ) * (2.0 * best.cost / dof)
            stderr = {k: float(math.sqrt(max(cov[i, i], 0.0))) for i, k in enumerate(names)}
        except np.linalg.LinAlgError:
            pass
    return LawFit(
        law, target, {k: float(v) for k, v in zip(names, best.x)}, float(np.sqrt(np.mean(r**2))), stderr,
        int(r.size), bool(best.success),
    )


def trend_summary(records, fits: dict, target: str = "errA_L2") -> dict:
    """Spearman correlation of error vs dn_norm and the double-log residual relative to the best fit."""
    d = np.array([r.dn_norm for r in records], dtype=float)
    e = np.array([getattr(r, target) for r in records], dtype=float)
    rho = float(stats.spearmanr(d, e).statistic) if d.size >= 2 and np.ptp(d) > 0 and np.ptp(e) > 0 else float("nan")
    out = {"rank_correlation": rho}
    candidates = {k: f.residual for k, f in fits.items() if k in ("power", "double_log")}
    if "double_log" in candidates:
        floor = max(min(candidates.values()), 1e-300)
        out["double_log_residual_ratio"] = candidates["double_log"] / floor
    return out


CSV_COLUMNS = (
    "scenario", "eps_perturb", "dn_norm", "errA_L2", "errQ_L2", "lam", "delta", "R", "true_A_L2", "recon_rel_error",
)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, int, np.floating)) and not isinstance(v, bool) else str(v)


def _figure():
    from matplotlib.figure import Figure

    return Figure(figsize=(5.0, 3.6))


def _save_svg(fig, path: Path) -> None:
    import matplotlib

    with matplotlib.rc_context({"svg.hashsalt": "cdlab", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def _plot_stability(records, path: Path) -> None:
    d, e = _points(records, "errA_L2")
    fig = _figure()
    ax = fig.add_subplot()
    ok = d < 1.0
    ax.loglog(np.log(np.abs(np.log(d[ok]))), e[ok], "o-")
    ax.set_xlabel("log|log dn_norm|")
    ax.set_ylabel("errA_L2")
    fig.tight_layout()
    _save_svg(fig, path)


def _plot_family(records, path: Path) -> None:
    c = np.array([r.eps_perturb for r in records])
    keep = c > 0
    fig = _figure()
    ax = fig.add_subplot()
    for name in ("dn_norm", "errA_L2"):
        v = np.array([getattr(r, name) for r in records])
        k = keep & (v > 0)
        ax.loglog(c[k], v[k], "o-", label=name)
    ax.set_xlabel("perturbation scale")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)


def plot_curves(x, ys: dict, xlabel: str, path: Path) -> None:
    fig = _figure()
    ax = fig.add_subplot()
    for label, y in ys.items():
        ax.loglog(x, y, "o-", label=label)
    ax.set_xlabel(xlabel)
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)


def emit_report(records, fits, out_dir, extras: dict | None = None) -> dict:
    """Write ``records.csv``, ``fits.json``, ``timings.json`` and SVG plots; returns the written paths.

    Runtimes go to ``timings.json`` so that the CSV is reproducible byte for
    byte. ``extras`` may carry ``remainder`` (``lambdas``, ``l2``, ``h1``)
    and ``carleman`` (``lambdas``, ``C_by_lambda``) curves.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    records = list(records)
    fits = dict(fits or {})
    paths = {"csv": out / "records.csv", "fits": out / "fits.json", "timings": out / "timings.json"}
    with paths["csv"].open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.scenario, _fmt(r.eps_perturb), _fmt(r.dn_norm), _fmt(r.errA_L2), _fmt(r.errQ_L2),
                _fmt(r.params.lam), _fmt(r.params.delta), _fmt(r.params.R),
                _fmt(r.extra.get("true_A_L2", float("nan"))), _fmt(r.extra.get("recon_rel_error", float("nan"))),
            ])
    fit_doc = {k: (f.to_dict() if isinstance(f, LawFit) else f) for k, f in fits.items()}
    paths["fits"].write_text(json.dumps(fit_doc, indent=2, sort_keys=True, default=float) + "\n")
    paths["timings"].write_text(json.dumps([r.runtime_s for r in records]) + "\n")
    if records:
        paths["stability_svg"] = out / "stability_curve.svg"
        _plot_stability(records, paths["stability_svg"])
        paths["family_svg"] = out / "family.svg"
        _plot_family(records, paths["family_svg"])
    extras = extras or {}
    if "remainder" in extras:
        rem = extras["remainder"]
        paths["remainder_svg"] = out / "remainder_decay.svg"
        plot_curves(rem["lambdas"], {"L2": rem["l2"], "L2(H1)": rem["h1"]}, "lambda", paths["remainder_svg"])
    if "carleman" in extras:
        car = extras["carleman"]
        paths["carleman_svg"] = out / "carleman_ratio.svg"
        plot_curves(car["lambdas"], {"max lhs/rhs": car["C_by_lambda"]}, "lambda", paths["carleman_svg"])
    return paths
