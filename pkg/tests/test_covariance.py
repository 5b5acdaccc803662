import numpy as np
import pytest
from scipy.linalg import eigh

from nonconvavg.covariance import (
    CovarianceError,
    CovarianceModel,
    D_coeff,
    a_coeff,
    covariance_report,
    decay_envelope,
    discrete_extra_variance,
    sample_G0,
    vanishing_pairs_prediction,
)
from nonconvavg.dynamics import integrate_averaged
from nonconvavg.fast_process import FiniteChainSpec, stationary_law, stationary_vector
from nonconvavg.field import build_field, decompose_field
from nonconvavg.time_scales import FastScale, TimeScaleFamily, resonant_pairs

X0 = np.array([1.0])


def kernel_oracle(R, s):
    """exp(s R) from the spectral decomposition of the pi-symmetrized generator."""
    pi = stationary_vector_oracle(R)
    D = np.sqrt(pi)
    S = (D[:, None] * R) / D[None, :]
    if np.allclose(S, S.T):
        lam, V = eigh(S)
        return (V * np.exp(s * lam)) @ V.T / D[:, None] * D[None, :]
    lam, V = np.linalg.eig(R)
    return np.real((V * np.exp(s * lam)) @ np.linalg.inv(V))


def stationary_vector_oracle(R):
    A = np.vstack([R.T, np.ones(len(R))])
    b = np.zeros(len(R) + 1)
    b[-1] = 1
    return np.linalg.lstsq(A, b, rcond=None)[0]


def canonical_model(chain, dec, family, T=1.0):
    zb = integrate_averaged(dec.bar_B, T, X0, t_max=T * family.alpha_floats[-1] / family.alpha_floats[0])
    return CovarianceModel(dec, chain, family, zb, T)


@pytest.mark.parametrize("s1,s2", [(0.0, 0.0), (0.3, 1.2), (-0.5, 0.25), (2.0, -1.0)])
def test_a_canonical(canonical_decomposed, chain, family12, s1, s2):
    pairs = resonant_pairs(family12, 2, 2)
    a = a_coeff(canonical_decomposed, chain, pairs, 2, 2, 0, 0, X0, X0, [s1, s2])
    assert a == pytest.approx(np.exp(-2 * abs(s1)) * np.exp(-2 * abs(s2)), abs=1e-12)


def test_a_zero_component(canonical_decomposed, chain, family12):
    pairs = resonant_pairs(family12, 1, 1)
    assert a_coeff(canonical_decomposed, chain, pairs, 1, 1, 0, 0, X0, X0, [0.1]) == 0.0


def test_a_long_lags_vanish(canonical_decomposed, chain, family12):
    pairs = resonant_pairs(family12, 2, 2)
    assert abs(a_coeff(canonical_decomposed, chain, pairs, 2, 2, 0, 0, X0, X0, [30.0, 30.0])) < 1e-12


def test_a_exact_for_product_form_on_three_states():
    R = np.array([[-1.5, 1.0, 0.5], [0.3, -0.8, 0.5], [1.2, 0.4, -1.6]])
    vals = np.array([1.0, -0.5, 0.25])
    chain3 = FiniteChainSpec(R, vals, [1, 0, 0])
    fam = TimeScaleFamily((1, 2))
    spec = build_field("polynomial", d=1, ell=2, terms=[{"coef": [1.0], "x": [0], "xi": [1, 1]}])
    dec = decompose_field(spec, stationary_law(chain3))
    pi = stationary_vector_oracle(R)
    m = pi @ vals

    def corr(s):
        P = kernel_oracle(R, abs(s))
        return float(pi @ (vals[:, None] * P * vals[None, :]).sum(axis=1)) if s >= 0 else corr(-s)

    # B_2 = xi_1 (xi_2 - m): the pair correlations factorize
    pairs = resonant_pairs(fam, 2, 2)
    for s1, s2 in [(0.2, 0.7), (1.0, 0.1), (-0.4, 0.9)]:
        expected = corr(s1) * (corr(s2) - m * m)
        got = a_coeff(dec, chain3, pairs, 2, 2, 0, 0, X0, X0, [s1, s2])
        assert got == pytest.approx(expected, abs=1e-12)


def test_D_canonical(canonical_decomposed, chain, family12):
    val, trunc = D_coeff(canonical_decomposed, chain, family12, 2, 2, 0, 0, X0, X0)
    assert val == pytest.approx(1 / 6, abs=1e-9)
    assert trunc < 1e-8


def test_D_zero_cases(canonical_decomposed, chain, family12):
    assert D_coeff(canonical_decomposed, chain, family12, 1, 2, 0, 0, X0, X0)[0] == 0.0
    assert D_coeff(canonical_decomposed, chain, family12, 1, 1, 0, 0, X0, X0)[0] == 0.0
    with pytest.raises(CovarianceError):
        D_coeff(canonical_decomposed, chain, TimeScaleFamily((1, 2), (FastScale("power"),)), 3, 1, 0, 0, X0, X0)


def test_D_symmetry():
    R = np.array([[-1.0, 0.6, 0.4], [0.5, -1.2, 0.7], [0.9, 0.3, -1.2]])
    chain3 = FiniteChainSpec(R, [1.0, -0.3, 0.6], [1, 0, 0])
    fam = TimeScaleFamily((1, 2))
    terms = [
        {"coef": [-1.0], "x": [1], "xi": [0, 0]},
        {"coef": [1.0], "x": [0], "xi": [1, 1]},
        {"coef": [0.5], "x": [1], "xi": [1, 0]},
        {"coef": [0.3], "x": [1], "xi": [0, 1]},
    ]
    dec = decompose_field(build_field("polynomial", d=1, ell=2, terms=terms), stationary_law(chain3))
    x, y = np.array([0.7]), np.array([-0.4])
    for i in (1, 2):
        for j in (1, 2):
            a = D_coeff(dec, chain3, fam, i, j, 0, 0, x, y)[0]
            b = D_coeff(dec, chain3, fam, j, i, 0, 0, y, x)[0]
            assert a == pytest.approx(b, abs=1e-10)


def test_predicted_variance_canonical(canonical_decomposed, chain, family12):
    model = canonical_model(chain, canonical_decomposed, family12)
    t = np.array([0.25, 0.5, 1.0])
    assert np.allclose(model.var_G(t)[:, 0, 0], t / 3, atol=1e-9)
    rep = covariance_report(model, t)
    assert rep.psd and rep.monotone_variance
    assert rep.increment_structure_gap < 1e-9
    # E G_2(1)^2 with G_2(t) = eps^{-1/2} int_0^{t/2} B_2: D_22 * 1
    assert model.cov_components(2, 2, 1.0, 1.0)[0, 0] == pytest.approx(1 / 6, abs=1e-9)


def test_zero_field_gives_zero_A(chain, family12):
    dec = decompose_field(build_field("linear"), stationary_law(chain))
    model = canonical_model(chain, dec, family12)
    assert np.all(model.A(np.linspace(0, 1, 5)) == 0)


def test_decoupled_components_give_diagonal_A(chain, family12):
    terms = [
        {"coef": [1.0, 0.0], "x": [0, 0], "xi": [1, 1]},
        {"coef": [0.0, -1.0], "x": [0, 1], "xi": [0, 0]},
    ]
    dec = decompose_field(build_field("polynomial", d=2, ell=2, terms=terms), stationary_law(chain))
    zb = integrate_averaged(dec.bar_B, 1.0, [1.0, 1.0], t_max=2.0)
    model = CovarianceModel(dec, chain, family12, zb, 1.0)
    A = model.A(np.array([0.3, 0.9]))
    assert np.all(A[:, 0, 1] == 0) and np.all(A[:, 1, 0] == 0)
    assert np.all(A[:, 0, 0] > 0)


def test_A_positive_semidefinite_and_envelope():
    R = np.array([[-1.0, 0.6, 0.4], [0.5, -1.2, 0.7], [0.9, 0.3, -1.2]])
    chain3 = FiniteChainSpec(R, [1.0, -0.3, 0.6], [1, 0, 0])
    fam = TimeScaleFamily((1, 2))
    terms = [{"coef": [-1.0], "x": [1], "xi": [0, 0]}, {"coef": [1.0], "x": [0], "xi": [1, 1]}, {"coef": [0.5], "x": [1], "xi": [1, 0]}]
    dec = decompose_field(build_field("polynomial", d=1, ell=2, terms=terms), stationary_law(chain3))
    model = canonical_model(chain3, dec, fam)
    rep = covariance_report(model, np.linspace(0.1, 1.0, 10))
    assert rep.psd
    assert np.all(np.diff(rep.var_G[:, 0, 0]) >= -1e-12)
    env = decay_envelope(model, 2, 2)
    assert env["c"] > 0 and env["max_ratio"] <= 1 + 1e-9


def test_vanishing_prediction():
    fam = TimeScaleFamily((1, 2), (FastScale("power"),))
    assert vanishing_pairs_prediction(fam, 3, 1) == 0.0
    assert vanishing_pairs_prediction(fam, 3, 3) == 0.0
    with pytest.raises(CovarianceError):
        vanishing_pairs_prediction(fam, 2, 1)


def test_discrete_extra_variance(discrete_chain):
    fam = TimeScaleFamily((1, 2), (FastScale("power"),))
    spec = build_field("product_linear", ell=3, b=1.0)
    mu = stationary_law(discrete_chain)
    dec = decompose_field(spec, mu)
    zb = integrate_averaged(dec.bar_B, 1.0, X0, t_max=2.0)
    for s, t in [(0.5, 1.0), (1.0, 1.0), (0.3, 0.2)]:
        v = discrete_extra_variance(dec, mu, zb, 3, s, t, family=fam)
        assert v[0, 0] == pytest.approx(min(s, t), abs=1e-10)
    zero = decompose_field(build_field("product_linear", ell=3, b=0.0), mu)
    assert discrete_extra_variance(zero, mu, zb, 3, 1.0, 1.0)[0, 0] == 0.0


def test_discrete_total_variance(discrete_chain):
    # Var G(1) = (1 + lam^3)/(1 - lam^3) + 1 with lam = 1 - 2p, p = 1/4
    fam = TimeScaleFamily((1, 2), (FastScale("power"),))
    dec = decompose_field(build_field("product_linear", ell=3, b=1.0), stationary_law(discrete_chain))
    model = canonical_model(discrete_chain, dec, fam)
    lam3 = 0.5**3
    assert model.var_G(1.0)[0, 0] == pytest.approx((1 + lam3) / (1 - lam3) + 1, abs=1e-8)


def test_sample_G0(canonical_decomposed, chain, family12):
    rep = covariance_report(canonical_model(chain, canonical_decomposed, family12), np.array([0.5, 1.0]))
    draws = sample_G0(rep, 3, n_samples=10_000)
    assert draws.shape == (10_000, 2, 1)
    assert abs(draws[:, 1, 0].var() - 1 / 3) < 0.01


def test_sample_G0_zero(chain, family12):
    dec = decompose_field(build_field("linear"), stationary_law(chain))
    rep = covariance_report(canonical_model(chain, dec, family12), np.array([0.5, 1.0]))
    assert np.all(sample_G0(rep, 1, n_samples=10) == 0)


def test_sample_G0_independent_increments_single_scale(chain):
    fam = TimeScaleFamily((1,))
    spec = build_field("polynomial", d=1, ell=1, terms=[{"coef": [-1.0], "x": [1], "xi": [0]}, {"coef": [1.0], "x": [0], "xi": [1]}], K=3.0)
    dec = decompose_field(spec, stationary_law(chain))
    rep = covariance_report(canonical_model(chain, dec, fam), np.array([0.5, 1.0]))
    draws = sample_G0(rep, 9, n_samples=10_000)[..., 0]
    inc1, inc2 = draws[:, 0], draws[:, 1] - draws[:, 0]
    assert abs(np.corrcoef(inc1, inc2)[0, 1]) <= 0.05


def test_chain_required(dyadic, canonical_field, family12):
    dec = decompose_field(canonical_field, stationary_law(dyadic, n_nodes=64))
    with pytest.raises(CovarianceError):
        D_coeff(dec, dyadic, family12, 2, 2, 0, 0, X0, X0)
