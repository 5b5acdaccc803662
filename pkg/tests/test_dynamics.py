import numpy as np
import pytest

from nonconvavg.dynamics import (
    ScenarioGrid,
    integrate_averaged,
    integrate_slow,
    integrate_Y,
    riemann_sum_G,
    simulate_bundle,
    solve_limit_ode,
)
from nonconvavg.fast_process import sample_path, stationary_law, two_state_chain
from nonconvavg.field import FieldSpec, build_field, decompose_field
from nonconvavg.scenario import Scenario, derive_seed
from nonconvavg.time_scales import TimeScaleFamily

OUT = np.linspace(0.1, 1.0, 10)


def test_grid_step_cap():
    with pytest.raises(ValueError):
        ScenarioGrid(0.1, 1.0, OUT, h=0.5)
    assert ScenarioGrid(1e-3, 1.0, OUT).h == 1.0
    assert ScenarioGrid(0.1, 1.0, OUT).h == pytest.approx(0.1)


def test_averaged_linear_closed_form():
    zb = integrate_averaged(lambda x: -x, 1.0, [1.0])
    t = np.linspace(0, 1, 101)
    assert np.max(np.abs(zb(t)[:, 0] - np.exp(-t))) < 1e-10


def test_averaged_zero_and_constant():
    zb = integrate_averaged(lambda x: 0 * x, 1.0, [0.7])
    assert np.all(zb(OUT) == 0.7)
    zc = integrate_averaged(lambda x: 0 * x + 0.3, 2.0, [0.7])
    assert np.allclose(zc(OUT)[:, 0], 0.7 + 0.3 * OUT, atol=1e-13)


def test_slow_linear_closed_form(chain, family12):
    spec = build_field("linear", a=1.0)
    grid = ScenarioGrid(0.1, 1.0, OUT, h=1e-3)
    path = sample_path(chain, 25.0, 2)
    res = integrate_slow(spec, path, family12, grid, [1.0])
    assert np.max(np.abs(res.Z[:, 0] - np.exp(-OUT))) < 1e-8


def test_slow_without_fast_dependence_matches_averaged(chain, family12):
    spec = build_field("linear", a=0.5)
    dec = decompose_field(spec, stationary_law(chain))
    zb = integrate_averaged(dec.bar_B, 1.0, [1.0], t_max=2.0)
    for eps in (0.1, 0.01):
        grid = ScenarioGrid(eps, 1.0, OUT)
        res = integrate_slow(spec, sample_path(chain, 2.0 / eps + 1, 1), family12, grid, [1.0], zbar=zb)
        assert np.max(np.abs(res.Z - zb(OUT))) < 1e-9


def test_slow_horizon_error(chain, canonical_field, family12):
    grid = ScenarioGrid(0.1, 1.0, OUT)
    with pytest.raises(Exception, match="horizon"):
        integrate_slow(canonical_field, sample_path(chain, 5.0, 1), family12, grid, [1.0])


def test_discrete_slow_is_exact_recursion(discrete_chain, family12, canonical_field):
    eps = 0.01
    grid = ScenarioGrid(eps, 1.0, np.array([0.5, 1.0]))
    path = sample_path(discrete_chain, 300.0, 4)
    res = integrate_slow(canonical_field, path, family12, grid, [1.0])
    x = 1.0
    ref = {}
    for n in range(100):
        if n in (50,):
            ref[0.5] = x
        x = x + eps * (-x + path(n)[0] * path(2 * n)[0])
    ref[1.0] = x
    assert res.Z[0, 0] == pytest.approx(ref[0.5], abs=1e-14)
    assert res.Z[1, 0] == pytest.approx(ref[1.0], abs=1e-14)


def test_canonical_averaging_at_small_eps(canonical_scenario):
    bundles = canonical_scenario.simulate(1e-3, [derive_seed(11, m) for m in range(200)])
    sup = np.array([b.sup_deviation for b in bundles])
    assert np.mean(sup <= 0.2) >= 0.95


def test_Y_with_zero_components(chain, family12):
    spec = build_field("linear", a=1.0)
    dec = decompose_field(spec, stationary_law(chain))
    zb = integrate_averaged(dec.bar_B, 1.0, [1.0], t_max=2.0)
    grid = ScenarioGrid(0.01, 1.0, OUT)
    res = integrate_Y(dec, sample_path(chain, 201.0, 3), family12, grid, [1.5], zb)
    assert np.max(np.abs(res.Y - (zb(OUT) + 0.5))) < 1e-9
    assert np.all(res.Y_components == 0)


def test_Y_identity_residual(canonical_decomposed, chain, family12, canonical_scenario):
    grid = ScenarioGrid(1e-3, 1.0, OUT)
    res = integrate_Y(canonical_decomposed, sample_path(chain, 2001.0, 8), family12, grid, [1.0], canonical_scenario.zbar)
    assert res.identity_residual <= 1e-8


def test_Y_single_scale_matches_direct_quadrature(chain):
    fam = TimeScaleFamily((1,))
    spec = FieldSpec(1, 1, 1, lambda x, xi: -x + xi[..., 0, :], lambda x, xi: -np.ones(x.shape + (1,)), K=3.0)
    dec = decompose_field(spec, stationary_law(chain))
    zb = integrate_averaged(dec.bar_B, 1.0, [1.0])
    eps = 0.05
    path = sample_path(chain, 21.0, 6)
    res = integrate_Y(dec, path, fam, ScenarioGrid(eps, 1.0, np.array([1.0])), [1.0], zb)
    s = (np.arange(200_000) + 0.5) / 200_000
    direct = np.mean(path(s / eps)[:, 0])
    assert res.Y_components[0, 0, 0] == pytest.approx(direct, abs=1e-4)


def test_fluctuations_vanish_without_fast_dependence(chain, family12):
    scen = Scenario("flat", chain, build_field("linear", a=1.0), family12)
    b = scen.simulate(0.01, [5])[0]
    assert np.max(np.abs(b.G)) < 1e-9 and np.max(np.abs(b.Q)) < 1e-9


def test_fluctuation_scaling(canonical_scenario):
    seeds = [derive_seed(5, m) for m in range(1000)]
    var = []
    for eps in (2e-3, 1e-3):
        bs = canonical_scenario.simulate(eps, seeds)
        var.append(np.var([b.Y[-1, 0] - b.Zbar[-1, 0] for b in bs], ddof=1))
    assert 0.4 <= var[1] / var[0] <= 0.6


def test_bundle_replay_is_bit_identical(canonical_scenario):
    a = canonical_scenario.simulate(0.01, [42])[0]
    b = canonical_scenario.simulate(0.01, [42])[0]
    for name in ("Y", "Y_components", "Z", "Zbar"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_riemann_sum_bound(canonical_decomposed, chain, family12, canonical_scenario):
    out = riemann_sum_G(canonical_decomposed, sample_path(chain, 2100.0, 3), family12, 1000, 1.0, canonical_scenario.zbar)
    assert abs(out["riemann"][1, 0] - out["G"][1, 0]) <= 2 * 3.0 * 1.0 * 1 / np.sqrt(1000)
    assert out["within_bound"]
    assert np.all(out["riemann"][0] == 0)


def test_riemann_single_block(canonical_decomposed, chain, family12, canonical_scenario):
    # N = 1, t < alpha_i: the block sum is the integral over [0, 1]
    path = sample_path(chain, 10.0, 12)
    out = riemann_sum_G(canonical_decomposed, path, family12, 1, 0.5, canonical_scenario.zbar)
    s = (np.arange(100_000) + 0.5) / 100_000
    direct = np.mean(path(s)[:, 0] * path(2 * s)[:, 0])
    assert out["riemann"][1, 0] == pytest.approx(direct, abs=1e-4)


def test_limit_ode_zero_kernel():
    t = np.linspace(0, 1, 21)
    G = np.sin(3 * t)[:, None]
    sol = solve_limit_ode((t, G), lambda s: np.zeros((1, 1)), None)
    assert np.allclose(sol.H, G, atol=1e-14)


def test_limit_ode_closed_form():
    t = np.linspace(0, 2, 41)
    sol = solve_limit_ode(lambda s: np.asarray(s)[..., None], lambda s: -np.ones((1, 1)), None, times=t)
    assert np.max(np.abs(sol.H[:, 0] - (1 - np.exp(-t)))) < 1e-7
    assert sol.gronwall_holds


def test_limit_ode_zero_input():
    t = np.linspace(0, 1, 11)
    sol = solve_limit_ode((t, np.zeros((11, 1))), lambda s: -np.ones((1, 1)), None)
    assert np.all(sol.H == 0)


def test_gronwall_holds_pathwise(canonical_scenario):
    dec = canonical_scenario.decomposed
    for b in canonical_scenario.simulate(0.01, [1, 2, 3]):
        t = np.concatenate([[0.0], b.times])
        G = np.vstack([[0.0], b.G])
        sol = solve_limit_ode((t, G), dec.bar_B_gradient, canonical_scenario.zbar, C=3.0)
        assert sol.gronwall_holds
