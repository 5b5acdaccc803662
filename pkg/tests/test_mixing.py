import numpy as np
import pytest

from nonconvavg.fast_process import DyadicMapSpec, FiniteChainSpec, two_state_chain
from nonconvavg.field import build_field, decompose_field
from nonconvavg.fast_process import stationary_law
from nonconvavg.mixing import (
    CoefficientSeries,
    CoefficientTable,
    MixingError,
    check_assumption,
    coefficient_table,
    eta_coeff,
    holder_norm,
    martingale_difference_check,
    two_param_compare,
    zeta_coeff,
)
from nonconvavg.time_scales import TimeScaleFamily


def test_holder_norm_constant():
    g = np.full(11, -0.7)
    assert holder_norm(g, np.linspace(-1, 1, 11), 1.0) == pytest.approx(0.7)


def test_holder_norm_identity_approaches_two():
    x = np.linspace(-1, 1, 401)
    vals = np.array([holder_norm(x, x, 1.0) for x in [np.linspace(-1, 1, n) for n in (5, 51, 401)]])
    assert np.all(np.diff(vals) >= -1e-12)
    assert holder_norm(x, x, 1.0) == pytest.approx(2.0, abs=1e-12)


def test_holder_norm_two_lipschitz_clamp():
    x = np.linspace(-1, 1, 801)
    g = np.clip(2 * x, -1, 1)
    assert holder_norm(g, x, 1.0) >= 2.9


def test_holder_norm_two_arguments():
    a = np.linspace(0, 1, 21)
    g = a[:, None] - a[None, :]
    # sup |g| = 1, increments |da - db| <= |da| + |db|
    assert holder_norm(g, [a, a], 1.0) == pytest.approx(2.0, abs=1e-12)


def test_holder_norm_empty():
    with pytest.raises(MixingError):
        holder_norm(np.array([]), np.array([]), 1.0)


def test_eta_dyadic_is_zero(dyadic):
    for n in (1, 3, 10):
        for s in (0, 2):
            cv = eta_coeff(dyadic, 4.0, 1.0, s, n)
            assert cv.value == 0.0 and cv.method == "exact"


def test_eta_chain_geometric_rate(stationary_chain):
    vals = [eta_coeff(stationary_chain, 4.0, 1.0, 0.0, n).value for n in range(2, 8)]
    ratios = np.array(vals[1:]) / np.array(vals[:-1])
    assert np.allclose(ratios, np.exp(-2.0), atol=1e-6)
    assert eta_coeff(stationary_chain, 4.0, 1.0, 0.0, 2).method == "upper-bound"


def test_eta_at_zero_is_at_most_two(chain):
    assert eta_coeff(chain, 2.0, 1.0, 0.0, 0).value <= 2.0


def test_zeta_chain(chain):
    for n in (1, 5):
        assert zeta_coeff(chain, 2.0, n).value == 0.0


def test_zeta_dyadic_exact(dyadic):
    for n in (1, 2, 5, 10):
        assert zeta_coeff(dyadic, 2.0, n).value == pytest.approx(2.0**-n / np.sqrt(12), rel=1e-9)
    # the sigma-algebra at [t] fixes no digits of x itself
    assert zeta_coeff(dyadic, 2.0, 0).value == pytest.approx(1 / np.sqrt(12), rel=1e-9)


def test_zeta_dyadic_ratio(dyadic):
    v = np.array([zeta_coeff(dyadic, 2.0, n).value for n in range(1, 12)])
    assert np.allclose(v[1:] / v[:-1], 0.5, atol=1e-9)


def test_table_monotone(chain, dyadic):
    for proc in (chain, dyadic):
        tab = coefficient_table(proc, n_max=25)
        assert tab.monotone_violations() == []
        assert all(np.all(s.values >= 0) for s in tab.series)


def test_assumption_passes_for_chain_and_dyadic(chain, dyadic):
    assert check_assumption(coefficient_table(chain, n_max=30), 1.0, 2, 1).verdict == "pass"
    assert check_assumption(coefficient_table(dyadic, n_max=30), 1.0, 2, 1).verdict == "pass"


def harmonic_table(n_max=40):
    n = np.arange(n_max + 1)
    eta = CoefficientSeries("eta", {"p": 4.0, "kappa": 1.0, "s": 0.0}, n, 1.0 / (n + 1), ("exact",) * len(n))
    zeta = CoefficientSeries("zeta", {"q": 2.0}, n, 1.0 / (n + 1), ("exact",) * len(n))
    return CoefficientTable([eta, zeta])


def test_assumption_fails_for_harmonic_table():
    assert check_assumption(harmonic_table(), 1.0, 2, 1).verdict == "fail"


def test_assumption_needs_long_table():
    with pytest.raises(MixingError):
        check_assumption(harmonic_table(10), 1.0, 2, 1)


def test_two_param_inequalities_chain(chain):
    rep = two_param_compare(chain, 4.0, 2.0, 40)
    assert np.all(rep.beta == 0) and np.all(rep.zeta == 0)
    assert rep.lower_holds.all() and rep.upper_holds.all()


def test_two_param_one_state():
    one = FiniteChainSpec([[0.0]], [1.0], [1.0])
    rep = two_param_compare(one, 4.0, 2.0, 10)
    assert np.all(rep.eta == 0) and np.all(rep.phi == 0) and rep.holds


def test_two_param_needs_chain(dyadic):
    with pytest.raises(MixingError):
        two_param_compare(dyadic, 4.0, 2.0, 5)


def test_martingale_canonical(canonical_decomposed, chain, family12):
    res = martingale_difference_check(canonical_decomposed, chain, family12, 2, 10, 1, 3, L=40)
    assert res.residual <= 1e-10
    assert res.passed
    edge = martingale_difference_check(canonical_decomposed, chain, family12, 2, 10, 0, 3, L=40)
    assert edge.passed and edge.residual <= 1e-10


def test_martingale_zero_component(canonical_decomposed, chain, family12):
    res = martingale_difference_check(canonical_decomposed, chain, family12, 1, 10, 1, 3, L=40)
    assert res.residual == 0.0


def test_martingale_needs_chain(canonical_decomposed, dyadic, family12):
    with pytest.raises(MixingError):
        martingale_difference_check(canonical_decomposed, dyadic, family12, 2, 10, 1, 3)
