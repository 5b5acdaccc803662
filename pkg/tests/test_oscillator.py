import numpy as np
import pytest

from nonconvavg.fast_process import two_state_chain
from nonconvavg.oscillator import OscillatorError, OscillatorSystem, build_forcing, plug_back_residual, run_oscillator
from nonconvavg.time_scales import TimeScaleFamily

FAM = TimeScaleFamily((1,))


def system(name, chain=None, **kw):
    return OscillatorSystem(1.0, build_forcing(name, **kw), chain or two_state_chain(initial=(0.5, 0.5)), FAM, r0=1.0, phi0=0.2)


def test_lambda_must_be_positive():
    with pytest.raises(OscillatorError):
        OscillatorSystem(0.0, build_forcing("zero"), two_state_chain(), FAM)


def test_unknown_forcing():
    with pytest.raises(OscillatorError):
        build_forcing("cubic")


def test_unforced_amplitude_and_phase_constant():
    ens = run_oscillator(system("zero"), 3, [0.1], 1, n_boot=10)[0]
    assert np.allclose(ens.states[..., 0], 1.0, atol=1e-14)
    assert np.allclose(ens.states[..., 1], 0.2, atol=1e-14)


def test_forcing_average_vanishes_and_damping_decays():
    s = system("forcing", c=1.0)
    assert np.allclose(s.bar_B(np.array([[1.3, 0.4]])), 0.0, atol=1e-15)
    # g = -2 beta v: r' = -2 beta r cos^2, averaging to -beta r
    d = system("damped_forcing", c=1.0, beta=0.5)
    assert d.bar_B(np.array([[1.3, 0.4]]))[0, 0] == pytest.approx(-0.5 * 1.3, abs=1e-14)
    zb = d.averaged(1.0)
    assert zb(np.array([1.0]))[0, 0] == pytest.approx(np.exp(-0.5), abs=1e-9)


def test_plug_back_residual():
    for name in ("forcing", "damped_forcing"):
        out = plug_back_residual(system(name), 3, 0.1, 1.0, h=1e-3)
        assert out["position_residual"] <= 1e-6
        assert out["velocity_residual"] <= 1e-6


def test_energy_matches_averaged_prediction():
    ens = run_oscillator(system("damped_forcing"), 200, [1e-2], 20240605, n_boot=500)[0]
    assert ens.energy_within_ci


def test_run_is_deterministic():
    a = run_oscillator(system("forcing"), 5, [0.05], 9, n_boot=10)[0]
    b = run_oscillator(system("forcing"), 5, [0.05], 9, n_boot=10)[0]
    assert np.array_equal(a.states, b.states)
