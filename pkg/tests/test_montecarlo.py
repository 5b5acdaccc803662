import numpy as np
import pytest

from nonconvavg.covariance import CovarianceModel, covariance_report, sample_G0
from nonconvavg.field import build_field
from nonconvavg.montecarlo import (
    bootstrap_cov,
    compare_covariance,
    default_threads,
    holm,
    normality_tests,
    report_from_samples,
    run_ensemble,
    vanishing_trend,
)
from nonconvavg.scenario import Scenario
from nonconvavg.time_scales import FastScale, TimeScaleFamily


def cov_report_for(scen):
    model = CovarianceModel(scen.decomposed, scen.process, scen.family, scen.zbar, scen.T_final)
    return covariance_report(model, scen.output_times, scen.decomposed.bar_B_gradient)


@pytest.fixture(scope="module")
def canonical_small(canonical_scenario):
    return run_ensemble(canonical_scenario, 400, [1e-2, 1e-3], base_seed=77, threads=1)


def test_zero_fluctuations_for_flat_field(chain, family12):
    scen = Scenario("flat", chain, build_field("linear"), family12)
    rep = run_ensemble(scen, 2, [0.1], 1, threads=1, n_boot=20)
    run = rep.runs[0]
    assert np.max(np.abs(run.G)) < 1e-10  # quadrature vs spline rounding
    assert np.max(np.abs(run.G_components)) == 0.0
    assert np.all(np.abs(run.stats["components"]["cov"]) == 0)


def test_M_must_be_at_least_two(canonical_scenario):
    with pytest.raises(ValueError):
        run_ensemble(canonical_scenario, 1, [0.1], 0)


def test_ensemble_determinism_and_thread_independence(canonical_scenario):
    a = run_ensemble(canonical_scenario, 30, [0.05], 5, threads=1, n_boot=50)
    b = run_ensemble(canonical_scenario, 30, [0.05], 5, threads=2, n_boot=50)
    assert np.array_equal(a.runs[0].G, b.runs[0].G)
    assert np.array_equal(a.runs[0].Q, b.runs[0].Q)
    assert a.stat_rows() == b.stat_rows()


def test_threads_env(monkeypatch):
    monkeypatch.setenv("NONCONVAVG_THREADS", "3")
    assert default_threads() == 3


def test_compare_covariance_canonical(canonical_small, canonical_scenario):
    verdict = compare_covariance(canonical_small, cov_report_for(canonical_scenario), epsilon=1e-3)
    assert verdict["pass_rate"] >= 0.9
    g22 = [r for r in verdict["rows"] if r["kind"] == "component" and r["i"] == 2 and r["j"] == 2 and r["s"] == 1 and r["t"] == 1][0]
    assert g22["predicted"] == pytest.approx(1 / 6, abs=1e-9)
    assert "alpha_i" in verdict["convention"]


def test_compare_covariance_flags_doubled_prediction(canonical_small, chain, family12):
    # c = sqrt(2) doubles every D
    doubled = Scenario("doubled", chain, build_field("product_linear", c=np.sqrt(2.0)), family12)
    verdict = compare_covariance(canonical_small, cov_report_for(doubled), epsilon=1e-3)
    flagged = [r for r in verdict["rows"] if r["flagged"]]
    assert any(r["kind"] == "G" and r["s"] == 1 and r["t"] == 1 for r in flagged)


def test_compare_covariance_zero_field(chain, family12):
    scen = Scenario("flat", chain, build_field("linear"), family12)
    rep = run_ensemble(scen, 5, [0.1], 1, threads=1, n_boot=20)
    verdict = compare_covariance(rep, cov_report_for(scen))
    assert verdict["n_flagged"] == 0
    assert all(r["predicted"] == 0 for r in verdict["rows"])


def test_compare_covariance_grid_mismatch(canonical_small, canonical_scenario):
    rep = covariance_report(cov_report_for(canonical_scenario).model, np.array([0.25, 1.0]))
    with pytest.raises(ValueError):
        compare_covariance(canonical_small, rep)


def test_vanishing_trend_zero_component(chain):
    fam = TimeScaleFamily((1, 2), (FastScale("power"),))
    scen = Scenario("no3", chain, build_field("product_linear", ell=3, b=0.0), fam, track_slow=False)
    rep = run_ensemble(scen, 4, [0.1, 0.05, 0.02], 1, threads=1, n_boot=20)
    out = vanishing_trend(rep, 3)
    assert out["passed"] and out["variance"] == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        vanishing_trend(run_ensemble(scen, 4, [0.1, 0.05], 1, threads=1, n_boot=20), 3)


def test_normality_on_gaussian_draws(canonical_scenario):
    rep_cov = cov_report_for(canonical_scenario)
    draws = sample_G0(rep_cov, 4, n_samples=2000)
    verdict = normality_tests(report_from_samples(draws, rep_cov.times, n_boot=50), rep_cov)
    assert verdict["passed"]
    assert all(r["standardization"] == "predicted" for r in verdict["rows"])


def test_normality_rejects_heavy_tails(canonical_scenario):
    rep_cov = cov_report_for(canonical_scenario)
    rng = np.random.default_rng(0)
    x = rng.standard_t(3, size=(2000, 2, 1)) * np.sqrt(1 / 9)
    verdict = normality_tests(report_from_samples(x, rep_cov.times, n_boot=50), rep_cov)
    assert not verdict["passed"]


def test_normality_needs_500(canonical_scenario):
    rep = report_from_samples(np.zeros((100, 2, 1)), [0.5, 1.0], n_boot=10)
    with pytest.raises(ValueError):
        normality_tests(rep, None)


def test_bootstrap_width_scales_like_inverse_sqrt_M():
    rng = np.random.default_rng(1)
    widths = []
    for M in (400, 1600):
        _, lo, hi = bootstrap_cov(rng.standard_normal((M, 1)), 1000, seed=M)
        widths.append(hi[0, 0] - lo[0, 0])
    assert 1.6 <= widths[0] / widths[1] <= 2.5


def test_bootstrap_covariance_symmetric_psd():
    rng = np.random.default_rng(2)
    cov, lo, hi = bootstrap_cov(rng.standard_normal((300, 3)) @ rng.standard_normal((3, 3)), 200, seed=1)
    assert np.allclose(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= 0
    assert np.all(lo <= cov + 1e-12) and np.all(cov <= hi + 1e-12)


def test_holm_hand_example():
    adj, rej = holm([0.01, 0.04, 0.03, 0.005], alpha=0.05)
    assert np.allclose(adj, [0.03, 0.06, 0.06, 0.02])
    assert rej.tolist() == [True, False, False, True]
