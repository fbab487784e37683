import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdlab.config import DEFAULT_STREAM, ExperimentConfig, ReconstructionConfig
from cdlab.experiments import (
    CSV_COLUMNS,
    ExperimentRecord,
    HypothesisViolation,
    Perturbation,
    emit_report,
    fit_stability_law,
    law_model,
    run_family,
    trend_summary,
)
from cdlab.fields import CoefficientPair, Expression, VectorField, make_divfree_field
from cdlab.reconstruction import StabilityParams
from cdlab.solver import worker_count

BASE = CoefficientPair.from_strings(["0", "0"], "0.5")
PERT = Perturbation(make_divfree_field(DEFAULT_STREAM), Expression(0, 2))
REC = ReconstructionConfig(lam=8.0, K=1, M=1.0)
EXP = ExperimentConfig(probe_size=3, power_iters=300)


def _records(d, e, scenario="synthetic"):
    return [ExperimentRecord(scenario, float(i + 1), float(a), float(b), float("nan"), StabilityParams(), 0.0)
            for i, (a, b) in enumerate(zip(d, e))]


def test_record_guards():
    with pytest.raises(ValueError):
        ExperimentRecord("x", 0.1, -1.0, 0.0, 0.0, StabilityParams(), 0.0)
    with pytest.raises(ValueError):
        ExperimentRecord("x", 0.0, 0.0, 0.5, 0.0, StabilityParams(), 0.0)


def test_hypothesis_guards(grid17):
    with pytest.raises(HypothesisViolation, match="Sigma"):
        Perturbation(VectorField(["1", "0"], 2), Expression(0, 2)).validate(grid17)
    with pytest.raises(HypothesisViolation, match="div"):
        Perturbation(VectorField(["x1*(1-x1)*x2*(1-x2)", "0"], 2), Expression(0, 2)).validate(grid17)
    assert PERT.validate(grid17) is PERT
    assert PERT.member(BASE, 0.0) is BASE


def test_zero_scale_single_record(grid17):
    (rec,) = run_family(BASE, PERT, [0.0], grid17, REC, EXP)
    assert rec.dn_norm == 0.0 and rec.errA_L2 == 0.0 and math.isnan(rec.errQ_L2)


def test_dn_norm_increases_with_scale(grid17):
    recs = run_family(BASE, PERT, [0.1, 0.2, 0.4], grid17, REC, EXP)
    dn = [r.dn_norm for r in recs]
    assert dn[0] < dn[1] < dn[2]
    assert all(r.errA_L2 > 0 and r.extra["true_A_L2"] > 0 for r in recs)


def test_potential_pass_fills_errQ(grid17):
    fam = Perturbation(VectorField.zero(2), Expression("x1*(1-x1)*x2*(1-x2)", 2))
    rec = ReconstructionConfig(lam=8.0, K=1, M=1.0, recover_q=True)
    (r,) = run_family(BASE, fam, [0.5], grid17, rec, EXP)
    assert r.errQ_L2 > 0 and r.extra["true_Q_L2"] > 0


def test_worker_count_reads_environment(monkeypatch):
    monkeypatch.setenv("CDLAB_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("CDLAB_THREADS", "junk")
    assert worker_count() == 1
    monkeypatch.delenv("CDLAB_THREADS")
    assert worker_count() == 1


def test_pool_matches_serial(grid17, monkeypatch):
    serial = run_family(BASE, PERT, [0.2, 0.4], grid17, REC, EXP)
    monkeypatch.setenv("CDLAB_THREADS", "2")
    pooled = run_family(BASE, PERT, [0.2, 0.4], grid17, REC, EXP)
    assert [r.dn_norm for r in serial] == [r.dn_norm for r in pooled]
    assert [r.errA_L2 for r in serial] == [r.errA_L2 for r in pooled]


@settings(max_examples=15)
@given(
    st.floats(-3.0, 3.0),
    st.floats(0.3, 2.0),
    st.floats(0.5, 4.0),
)
def test_double_log_fit_recovers_own_model(logC, a1, a2):
    d = np.geomspace(1e-12, 1e-2, 12)
    e = law_model("double_log", [logC, a1, a2], d)
    fit = fit_stability_law(_records(d, e), "double_log")
    assert fit.residual < 1e-6
    np.testing.assert_allclose(
        [fit.coefficients[k] for k in ("log_C", "alpha1", "alpha2")], [logC, a1, a2], atol=1e-6
    )


def test_power_and_triple_log_fits():
    d = np.geomspace(1e-6, 1e-1, 8)
    fit = fit_stability_law(_records(d, 2.0 * d**0.7), "power")
    assert fit.coefficients["a"] == pytest.approx(0.7, abs=1e-10) and fit.residual < 1e-10
    dbl = fit_stability_law(_records(d, 2.0 * d**0.7), "double_log")
    assert dbl.residual > fit.residual
    assert trend_summary(_records(d, 2.0 * d**0.7), {"power": fit, "double_log": dbl})["rank_correlation"] == 1.0
    d = np.geomspace(1e-30, 1e-3, 10)
    recs = [ExperimentRecord("s", float(i + 1), float(a), 0.1, float(b), StabilityParams(), 0.0)
            for i, (a, b) in enumerate(zip(d, law_model("triple_log", [0.0, 0.5, 1.5], d)))]
    tri = fit_stability_law(recs, "triple_log")
    assert tri.target == "errQ_L2" and tri.coefficients["beta2"] == pytest.approx(1.5, abs=1e-6)
    lo, hi = tri.band("beta2")
    assert lo <= tri.coefficients["beta2"] <= hi


def test_fit_guards():
    with pytest.raises(ValueError):
        fit_stability_law(_records([1e-3, 1e-2, 1e-1], [1, 2, 3]), "power")
    with pytest.raises(ValueError):
        fit_stability_law(_records([1e-3, 1e-2, 1e-1, 0.5], [1, 2, 3, 4]), "double_log")
    with pytest.raises(ValueError):
        fit_stability_law(_records([1e-3, 1e-2, 1e-1, 0.2], [1, 2, 3, 4]), "cubic")


def test_emit_report_counts(tmp_path):
    paths = emit_report([], {}, tmp_path / "empty")
    assert paths["csv"].read_text() == ",".join(CSV_COLUMNS) + "\n"
    assert not list((tmp_path / "empty").glob("*.svg"))
    d = np.geomspace(1e-4, 1e-2, 5)
    paths = emit_report(_records(d, d**0.5), {}, tmp_path / "five")
    assert len(paths["csv"].read_text().splitlines()) == 6
    assert sorted(p.name for p in (tmp_path / "five").glob("*.svg")) == ["family.svg", "stability_curve.svg"]
    extras = {"remainder": {"lambdas": [8, 16], "l2": [1.0, 0.5], "h1": [2.0, 1.5]},
              "carleman": {"lambdas": [2, 4], "C_by_lambda": [0.1, 0.05]}}
    paths = emit_report([], {}, tmp_path / "extras", extras)
    assert paths["remainder_svg"].exists() and paths["carleman_svg"].exists()


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report([], {}, blocker / "sub")


def test_report_is_byte_deterministic(grid17, tmp_path):
    outs = []
    for run in ("a", "b"):
        recs = run_family(BASE, PERT, [0.1, 0.2, 0.4, 0.8], grid17, REC, EXP)
        fits = {"power": fit_stability_law(recs, "power")}
        emit_report(recs, fits, tmp_path / run)
        outs.append({name: (tmp_path / run / name).read_bytes()
                     for name in ("records.csv", "fits.json", "stability_curve.svg", "family.svg")})
    assert outs[0] == outs[1]
