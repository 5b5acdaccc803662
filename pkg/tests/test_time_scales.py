from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonconvavg.time_scales import (
    FastScale,
    GrowthConditionError,
    TimeScaleFamily,
    resonant_pairs,
    tau,
    validate_growth,
)


def brute_pairs(alphas, i, j):
    """Every (i', j') with i' <= i, j' <= j and alpha_i'/alpha_i = alpha_j'/alpha_j."""
    out = []
    for ip in range(1, i + 1):
        for jp in range(1, j + 1):
            r1 = Fraction(alphas[ip - 1]) / Fraction(alphas[i - 1])
            r2 = Fraction(alphas[jp - 1]) / Fraction(alphas[j - 1])
            if r1 == r2:
                out.append((ip, jp, r1))
    return sorted(out, key=lambda p: p[2])


def as_tuples(pairs):
    return [(p.i_prime, p.j_prime, Fraction(p.rho)) for p in pairs]


def test_pairs_12_22():
    fam = TimeScaleFamily((1, 2))
    assert as_tuples(resonant_pairs(fam, 2, 2)) == [(1, 1, Fraction(1, 2)), (2, 2, Fraction(1))]


def test_pairs_12_12():
    assert as_tuples(resonant_pairs(TimeScaleFamily((1, 2)), 1, 2)) == [(1, 2, Fraction(1))]


def test_pairs_123_32():
    assert as_tuples(resonant_pairs(TimeScaleFamily((1, 2, 3)), 3, 2)) == [(3, 2, Fraction(1))]


def test_pairs_match_brute_force_on_random_rational_families():
    rng = np.random.default_rng(20240601)
    for _ in range(20):
        k = int(rng.integers(2, 6))
        vals = sorted({Fraction(int(rng.integers(1, 13)), int(rng.integers(1, 5))) for _ in range(3 * k)})
        alphas = vals[:k]
        if len(alphas) < 2:
            continue
        fam = TimeScaleFamily(tuple(alphas))
        for i in range(1, fam.k + 1):
            for j in range(1, fam.k + 1):
                assert as_tuples(resonant_pairs(fam, i, j)) == brute_pairs(alphas, i, j)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=2, max_size=5, unique=True), st.data())
def test_pairs_properties(ints, data):
    alphas = sorted(ints)
    fam = TimeScaleFamily(tuple(alphas))
    i = data.draw(st.integers(1, fam.k))
    j = data.draw(st.integers(1, fam.k))
    pairs = resonant_pairs(fam, i, j)
    rhos = [Fraction(p.rho) for p in pairs]
    assert (pairs[-1].i_prime, pairs[-1].j_prime, rhos[-1]) == (i, j, 1)
    assert all(0 < r <= 1 for r in rhos)
    assert all(a < b for a, b in zip(rhos, rhos[1:]))
    swapped = [(p.j_prime, p.i_prime, Fraction(p.rho)) for p in resonant_pairs(fam, j, i)]
    assert swapped == as_tuples(pairs)


def test_independent_rates_have_no_extra_pairs():
    fam = TimeScaleFamily((1.0, np.sqrt(2.0), np.pi))
    for i in range(1, 4):
        for j in range(1, 4):
            got = [(p.i_prime, p.j_prime) for p in resonant_pairs(fam, i, j)]
            # on the diagonal every (i', i') with i' <= i resonates trivially
            assert got == ([(n, n) for n in range(1, i + 1)] if i == j else [(i, j)])


def test_tau():
    fam = TimeScaleFamily((1, 2), (FastScale("power", p=2.0),))
    assert tau(fam, 2, 4.0) == 2.0
    assert tau(fam, 3, 4.0) == 4.0
    assert tau(TimeScaleFamily((0.5, 1.0)), 1, 1.0) == 2.0
    with pytest.raises(IndexError):
        tau(fam, 4, 1.0)


def test_growth_square_scale_diverges():
    fam = TimeScaleFamily((1, 2), (FastScale("power", p=2.0),))
    rep = validate_growth(fam, [0.1], 1000.0)
    row = rep.rows[0]
    assert row["shift_diverges"]
    # q(t + 0.1) - q(t) = 0.2 t + 0.01 is smallest at the first grid point
    assert row["min_shift_increment"] == pytest.approx(0.2 * 1e-3 + 0.01, rel=1e-9)


def test_growth_linear_fast_scale_fails():
    fam = TimeScaleFamily((1, 2), (FastScale("polynomial", coeffs=(0.0, 2.0)),))
    rep = validate_growth(fam, [0.5], 1000.0)
    assert not rep.valid
    assert not rep.rows[0]["separation_diverges"]


def test_growth_without_fast_scales_is_empty():
    rep = validate_growth(TimeScaleFamily((1, 2)), [0.5, 1, 2], 100.0)
    assert rep.valid and rep.rows == []


def test_growth_rejects_non_monotone_scale():
    fam = TimeScaleFamily((1,), (FastScale("polynomial", coeffs=(0.0, 1.0, -3.0, 1.0)),))
    with pytest.raises(GrowthConditionError, match="q_2"):
        validate_growth(fam, [1.0], 10.0)


def test_tlog_scale_inverse():
    fs = FastScale("tlog")
    t = np.geomspace(1e-3, 1e4, 50)
    assert np.allclose(fs.inverse(fs.value(t, 2.0), 2.0), t, rtol=1e-12)


def test_rates_must_increase():
    with pytest.raises(GrowthConditionError):
        TimeScaleFamily((2, 1))
    with pytest.raises(GrowthConditionError):
        TimeScaleFamily((0, 1))
