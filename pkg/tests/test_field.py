import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonconvavg.fast_process import DiscreteMeasure, sample_path, stationary_law, two_state_chain
from nonconvavg.field import (
    FieldError,
    FieldSpec,
    average_field,
    build_field,
    decompose_field,
    empirical_average,
    validate_field,
)
from nonconvavg.time_scales import TimeScaleFamily

PM1 = DiscreteMeasure(np.array([[1.0], [-1.0]]), np.array([0.5, 0.5]))


def additive_field():
    # f(x) + g1(xi1) + g2(xi2) with g1 = xi^2 + xi, g2 = 3 xi
    def ev(x, xi):
        return -x + (xi[..., 0, :] ** 2 + xi[..., 0, :]) + 3 * xi[..., 1, :]

    return FieldSpec(1, 2, 1, ev, lambda x, xi: -np.ones(x.shape + (1,)), K=10.0)


def test_validate_canonical_passes_with_K3(canonical_field):
    rep = validate_field(canonical_field, 500, 1)
    assert canonical_field.K == 3.0
    assert rep.passed
    assert rep.ratios["bound"] == pytest.approx(3.0)
    assert rep.ratios["lipschitz_x"] == pytest.approx(1.0, abs=1e-9)


def test_validate_unbounded_field_fails():
    spec = FieldSpec(1, 1, 1, lambda x, xi: x**2, K=1.0)
    rep = validate_field(spec, 200, 0)
    assert not rep.passed
    assert rep.ratios["bound"] > 1.0


def test_validate_constant_field_zero_ratios():
    rep = validate_field(build_field("constant", c=0.5), 100, 0)
    assert rep.passed
    for key in ("lipschitz_x", "holder_xi", "first_derivative", "second_derivative"):
        assert rep.ratios[key] == 0.0


def test_validate_rejects_nonfinite():
    spec = FieldSpec(1, 1, 1, lambda x, xi: x / 0.0, K=1.0)
    with np.errstate(divide="ignore", invalid="ignore"), pytest.raises(FieldError):
        validate_field(spec, 10, 0)


def test_average_canonical(canonical_field):
    bar = average_field(canonical_field, PM1)
    x = np.linspace(-2, 2, 9)[:, None]
    assert np.allclose(bar(x), -x, atol=1e-15)


def test_average_of_xi_is_mean():
    mu = DiscreteMeasure(np.array([[2.0], [-1.0], [0.5]]), np.array([0.2, 0.3, 0.5]))
    spec = FieldSpec(1, 1, 1, lambda x, xi: xi[..., 0, :] + 0 * x)
    assert average_field(spec, mu)(np.array([[0.3]]))[0, 0] == pytest.approx(mu.mean[0])


def test_average_budget_error():
    mu = DiscreteMeasure(np.arange(100.0)[:, None], np.full(100, 0.01))
    spec = FieldSpec(1, 4, 1, lambda x, xi: 0 * x)
    with pytest.raises(FieldError):
        average_field(spec, mu, budget=1000)


def test_decompose_canonical(canonical_field):
    dec = decompose_field(canonical_field, PM1)
    x = np.array([[0.7]])
    for a in (1.0, -1.0):
        for b in (1.0, -1.0):
            xi = np.array([[[a], [b]]])
            assert dec.component(1, x, xi)[0, 0] == pytest.approx(0.0, abs=1e-15)
            assert dec.component(2, x, xi)[0, 0] == pytest.approx(a * b)


def test_decompose_additive():
    dec = decompose_field(additive_field(), PM1)
    x = np.array([[0.3]])
    for a in (1.0, -1.0):
        for b in (1.0, -1.0):
            xi = np.array([[[a], [b]]])
            # E g1 = 1, E g2 = 0 under +-1
            assert dec.component(1, x, xi)[0, 0] == pytest.approx(a**2 + a - 1.0)
            assert dec.component(2, x, xi)[0, 0] == pytest.approx(3 * b)


def test_decompose_independent_field_has_zero_components():
    dec = decompose_field(build_field("linear", a=2.0), PM1)
    xi = np.array([[[1.0], [-1.0]]])
    assert np.all(dec.components(np.array([[0.4]]), xi) == 0)
    assert dec.is_zero(1) and dec.is_zero(2)


def random_measure(rng, n=3):
    w = rng.uniform(0.1, 1.0, n)
    return DiscreteMeasure(rng.uniform(-1, 1, (n, 1)), w / w.sum())


def random_poly(rng, ell=3):
    terms = []
    for _ in range(5):
        terms.append({"coef": [float(rng.normal())], "x": [int(rng.integers(0, 2))], "xi": rng.integers(0, 3, ell).tolist()})
    return build_field("polynomial", d=1, ell=ell, terms=terms)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_telescoping_and_centering(seed):
    rng = np.random.default_rng(seed)
    mu = random_measure(rng)
    spec = random_poly(rng)
    dec = decompose_field(spec, mu)
    x = rng.uniform(-2, 2, (100, 1))
    xi = rng.uniform(-1, 1, (100, 3, 1))
    total = dec.bar_B(x) + dec.components(x, xi).sum(axis=-2)
    assert np.max(np.abs(total - spec(x, xi))) < 1e-10
    # centering in the last argument of each component
    for i in range(1, 4):
        acc = 0.0
        for atom, w in zip(mu.atoms, mu.weights):
            z = xi.copy()
            z[:, i - 1, :] = atom
            acc = acc + w * dec.component(i, x, z)
        assert np.max(np.abs(acc)) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_component_ignores_later_arguments(seed):
    rng = np.random.default_rng(seed)
    dec = decompose_field(random_poly(rng), random_measure(rng))
    x = rng.uniform(-2, 2, (20, 1))
    xi = rng.uniform(-1, 1, (20, 3, 1))
    for i in (1, 2):
        z = xi.copy()
        z[:, i:, :] = rng.uniform(-1, 1, z[:, i:, :].shape)
        assert np.array_equal(dec.component(i, x, xi), dec.component(i, x, z))


def test_empirical_average_canonical(chain, canonical_field, family12):
    path = sample_path(chain, 1001.0, 4)
    val = empirical_average(canonical_field, path, family12, np.array([1.0]), 500.0)
    assert abs(val[0] + 1.0) < 0.05


def test_empirical_average_constant_and_riemann_oracle(chain, family12):
    path = sample_path(chain, 201.0, 9)
    const = build_field("constant", c=0.25)
    assert empirical_average(const, path, family12, np.array([0.0]), 100.0)[0] == 0.25
    spec = build_field("product_linear")
    x = np.array([0.5])
    # independent oracle: fine midpoint rule on the piecewise-constant integrand
    t = (np.arange(400_000) + 0.5) * (100.0 / 400_000)
    vals = -0.5 + path(t)[:, 0] * path(2 * t)[:, 0]
    got = empirical_average(spec, path, family12, x, 100.0)[0]
    assert got == pytest.approx(vals.mean(), abs=2e-3)
    # additivity over the two halves
    half = empirical_average(spec, path, family12, x, 50.0)[0]
    second = vals[200_000:].mean()
    assert got == pytest.approx(0.5 * (half + second), abs=2e-3)


def test_empirical_average_horizon(chain, canonical_field, family12):
    path = sample_path(chain, 10.0, 1)
    with pytest.raises(FieldError):
        empirical_average(canonical_field, path, family12, np.array([0.0]), 10.0)


def test_empirical_average_converges_to_bar(stationary_chain, canonical_field, family12):
    x = np.array([0.3])
    vals = np.array([empirical_average(canonical_field, sample_path(stationary_chain, 101.0, s), family12, x, 50.0)[0] for s in range(20)])
    bar = average_field(canonical_field, stationary_law(stationary_chain))(x[None])[0, 0]
    assert abs(vals.mean() - bar) < 3 * vals.std(ddof=1) / np.sqrt(len(vals))


def test_numeric_gradient_flagged():
    spec = FieldSpec(1, 1, 1, lambda x, xi: np.sin(x))
    assert spec.gradient_is_numeric
    assert spec.grad_x(np.array([[0.2]]), np.zeros((1, 1, 1)))[0, 0, 0] == pytest.approx(np.cos(0.2), abs=1e-8)
