import numpy as np
import pytest

from nonconvavg.torus import TorusError, build_torus_field, run_torus, torus_catalog


def test_catalog_names():
    assert set(torus_catalog()) == {"default", "phase_free", "locked"}
    with pytest.raises(TorusError):
        build_torus_field("spiral")


def test_bar_B_keeps_constant_modes_only():
    f = build_torus_field("default")
    a = np.array([[0.3], [1.2]])
    assert np.allclose(f.bar_B(a), 0.5 - 0.5 * a)


def test_bar_B_against_grid_average():
    # independent oracle: average over a uniform (psi, phi) grid of the reduced field
    f = build_torus_field("default")
    g = (np.arange(64) + 0.5) / 64
    psi, phi = np.meshgrid(g, g, indexing="ij")
    a = np.full(psi.shape + (1,), 0.8)
    vals = f.reduced(a, psi[..., None], phi[..., None])
    assert vals.mean() == pytest.approx(f.bar_B(np.array([[0.8]]))[0, 0], abs=1e-12)


def test_reduced_angles():
    # phi_i = i psi - (i - 1) phi
    f = build_torus_field("default")
    a = np.array([[0.7]])
    psi, phi = np.array([[0.13]]), np.array([[0.41]])
    direct = f(a, np.stack([psi, 2 * psi - phi], axis=-2))
    assert np.allclose(f.reduced(a, psi, phi), direct)


def test_locked_modes():
    assert build_torus_field("locked").locked_modes() == [0]
    assert build_torus_field("default").locked_modes() == []


def test_phase_free_error_is_integration_tolerance():
    res = run_torus(build_torus_field("phase_free"), [0.1, 0.01], n_points=8, seed=1)
    assert max(res.errors) < 1e-6


def test_default_error_decreases():
    res = run_torus(build_torus_field("default"), [0.1, 0.01], n_points=16, seed=2)
    assert res.strictly_decreasing
    assert res.per_point.shape == (2, 16)


def test_resonant_points_flagged():
    f = build_torus_field("default")
    assert f.resonance_distance(np.array([[0.0]]))[0] == 0.0
    res = run_torus(f, [0.1], n_points=8, a_box=(-0.02, 0.02), seed=3)
    assert res.resonant.all()
