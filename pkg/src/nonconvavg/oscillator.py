"""Randomly perturbed oscillator ``x'' + lam^2 x = eps g(x, x', xi(q_1(t)))`` in polar variables.

With ``x = r sin(theta)``, ``x' = r lam cos(theta)`` and ``theta = lam (t - phi)``
the pair ``(r, phi)`` moves slowly:

    r'   = eps g cos(theta) / lam
    phi' = eps g sin(theta) / (lam^2 r)

which is of the slow-fast form with the rotation angle and the driving
signal as fast variables.  Averaging over the angle (64-node trapezoid,
exact for the catalog's trigonometric degrees) and over ``mu`` gives
``bar_B(r, phi)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import AveragedPath, integrate_averaged, rk4_pieces
from .fast_process import FiniteChainSpec, sample_path, stationary_law
from .scenario import derive_seed
from .time_scales import TimeScaleFamily, switch_times

__all__ = [
    "OscillatorError",
    "ForcingTerm",
    "forcing_catalog",
    "build_forcing",
    "OscillatorSystem",
    "OscillatorEnsemble",
    "run_oscillator",
    "plug_back_residual",
]

N_THETA = 64


class OscillatorError(ValueError):
    pass


@dataclass(frozen=True)
class ForcingTerm:
    """``g(x, v, xi) = -2 beta v - omega2 x + c * xi_1``; ``xi`` has one block per scale."""

    name: str
    c: float = 0.0
    beta: float = 0.0
    omega2: float = 0.0

    def __call__(self, x, v, xi):
        return -2.0 * self.beta * v - self.omega2 * x + self.c * xi[..., 0, 0]


def _zero():
    """g = 0 (free oscillator)"""
    return ForcingTerm("zero")


def _forcing(c: float = 1.0):
    """g = c xi_1"""
    return ForcingTerm("forcing", c=c)


def _damped_forcing(c: float = 1.0, beta: float = 0.5):
    """g = -2 beta x' + c xi_1"""
    return ForcingTerm("damped_forcing", c=c, beta=beta)


_CATALOG = {"zero": _zero, "forcing": _forcing, "damped_forcing": _damped_forcing}


def forcing_catalog() -> dict:
    return {k: f.__doc__ or "" for k, f in _CATALOG.items()}


def build_forcing(name: str, **params) -> ForcingTerm:
    if name not in _CATALOG:
        raise OscillatorError(f"unknown forcing {name!r}; choose from {sorted(_CATALOG)}")
    return _CATALOG[name](**params)


@dataclass(eq=False)
class OscillatorSystem:
    lam: float
    g: ForcingTerm
    process: FiniteChainSpec
    family: TimeScaleFamily
    r0: float = 1.0
    phi0: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise OscillatorError("lam must be positive")
        if not self.r0 > 0:
            raise OscillatorError("initial amplitude must be positive")

    # transformed field ---------------------------------------------------
    def field(self, u, state, xi):
        """Slow right-hand side divided by eps: ``(r', phi') / eps`` at fast time ``u``."""
        r = state[..., 0]
        phi = state[..., 1]
        th = self.lam * (u - phi)
        c, s = np.cos(th), np.sin(th)
        x = r * s
        v = r * self.lam * c
        gv = self.g(x, v, xi)
        return np.stack([gv * c / self.lam, gv * s / (self.lam**2 * r)], axis=-1)

    def bar_B(self, state):
        """Average of :meth:`field` over the angle and over ``mu`` for every block."""
        state = np.asarray(state, dtype=float)
        mu = stationary_law(self.process)
        theta = 2 * np.pi * np.arange(N_THETA) / N_THETA
        out = np.zeros(state.shape)
        ell = self.family.ell
        for atom, w in zip(mu.atoms, mu.weights):
            xi = np.broadcast_to(atom, (ell, len(atom)))
            # u chosen so that lam (u - phi) runs over the angle grid
            u = theta[:, None] / self.lam + state[..., 1][None, ...]
            vals = self.field(u, np.broadcast_to(state, u.shape + (2,)), xi)
            out = out + w * vals.mean(axis=0)
        return out

    def averaged(self, T: float) -> AveragedPath:
        return integrate_averaged(self.bar_B, T, [self.r0, self.phi0])

    # reconstruction ----------------------------------------------------------
    def position(self, u, state):
        return state[..., 0] * np.sin(self.lam * (u - state[..., 1]))

    def velocity(self, u, state):
        return state[..., 0] * self.lam * np.cos(self.lam * (u - state[..., 1]))


def _cuts(system: OscillatorSystem, path, U: float, h: float, extra=()) -> np.ndarray:
    parts = [np.array([0.0, U]), np.arange(0.0, U, h), np.asarray(extra, dtype=float), switch_times(path, system.family, 0.0, U)]
    cuts = np.unique(np.concatenate(parts))
    return cuts[(cuts >= 0) & (cuts <= U)]


def _pad(cut_list, system, paths):
    M = len(cut_list)
    P = max(len(c) for c in cut_list) - 1
    starts = np.empty((M, P))
    dts = np.zeros((M, P))
    xis = np.empty((M, P, system.family.ell, system.process.dim))
    for m, (p, c) in enumerate(zip(paths, cut_list)):
        n = len(c) - 1
        starts[m, :n] = c[:-1]
        starts[m, n:] = c[-1]
        dts[m, :n] = np.diff(c)
        mids = 0.5 * (c[:-1] + c[1:])
        xi = np.stack([p(system.family.q(i, mids)) for i in range(1, system.family.ell + 1)], axis=-2)
        xis[m, :n] = xi
        xis[m, n:] = xi[-1]
    return starts, dts, xis


def simulate_polar(system: OscillatorSystem, paths, eps: float, T: float, h: float, out_times, zbar: AveragedPath | None = None):
    """``(r, phi)`` at ``out_times`` (slow clock) for each path, plus ``sup |(r, phi) - avg|``."""
    U = T / eps
    out_times = np.asarray(out_times, dtype=float)
    cut_list = [_cuts(system, p, U, h, out_times / eps) for p in paths]
    starts, dts, xis = _pad(cut_list, system, paths)
    M = len(paths)
    out_idx = np.stack([np.searchsorted(c, out_times / eps) - 1 for c in cut_list])
    out = np.empty((M, len(out_times), 2))
    sup = np.zeros(M)
    ends = starts + dts
    zb = zbar(eps * ends) if zbar is not None else None

    def record(k, x):
        hit = out_idx == k
        if hit.any():
            mm, jj = np.nonzero(hit)
            out[mm, jj] = x[mm]
        if zb is not None:
            np.maximum(sup, np.abs(x - zb[:, k]).max(axis=1), out=sup)

    x0 = np.broadcast_to(np.array([system.r0, system.phi0]), (M, 2))
    rk4_pieces(lambda u, x, xi: eps * system.field(u, x, xi), x0, starts, dts, xis, record)
    out[:, out_times == 0.0] = x0[:, None, :]
    return out, sup


def plug_back_residual(system: OscillatorSystem, seed: int, eps: float, T: float, h: float = 1e-3) -> dict:
    """Compare ``r sin(lam (t - phi))`` with a direct integration of the second-order equation.

    Both integrations use RK4 on identical pieces (cut at switch times and
    no longer than ``h``), so the difference measures the change of
    variables, not the driving signal.
    """
    U = T / eps
    path = sample_path(system.process, system.family.q(system.family.ell, U) + 1.0, seed)
    cuts = _cuts(system, path, U, h)
    starts, dts, xis = _pad([cuts], system, [path])
    polar = np.empty((len(cuts), 2))
    polar[0] = [system.r0, system.phi0]
    direct = np.empty((len(cuts), 2))
    direct[0] = [system.position(0.0, polar[0]), system.velocity(0.0, polar[0])]

    def rec_p(k, x):
        polar[k + 1] = x[0]

    def rec_d(k, x):
        direct[k + 1] = x[0]

    rk4_pieces(lambda u, x, xi: eps * system.field(u, x, xi), polar[:1], starts, dts, xis, rec_p)

    def second_order(u, y, xi):
        x, v = y[..., 0], y[..., 1]
        return np.stack([v, -system.lam**2 * x + eps * system.g(x, v, xi)], axis=-1)

    rk4_pieces(second_order, direct[:1], starts, dts, xis, rec_d)
    recon = system.position(cuts, polar)
    recon_v = system.velocity(cuts, polar)
    return {
        "position_residual": float(np.max(np.abs(recon - direct[:, 0]))),
        "velocity_residual": float(np.max(np.abs(recon_v - direct[:, 1]))),
        "n_pieces": len(cuts) - 1,
    }


@dataclass(eq=False)
class OscillatorEnsemble:
    epsilon: float
    times: np.ndarray
    states: np.ndarray  # (M, T, 2)
    sup_deviation: np.ndarray
    averaged: np.ndarray  # (T, 2)
    energy_mean: np.ndarray
    energy_ci: np.ndarray  # (T, 2)
    energy_averaged: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def energy_within_ci(self) -> bool:
        return bool(np.all((self.energy_averaged >= self.energy_ci[:, 0]) & (self.energy_averaged <= self.energy_ci[:, 1])))


def run_oscillator(system: OscillatorSystem, M: int, epsilon_list, base_seed: int, T: float = 1.0, out_times=(0.5, 1.0), h: float = 0.05, n_boot: int = 1000) -> list[OscillatorEnsemble]:
    """Ensembles of the polar slow motion; energy ``r^2`` against the averaged prediction."""
    if M < 2:
        raise OscillatorError("M must be at least 2")
    out_times = np.asarray(out_times, dtype=float)
    zbar = system.averaged(T)
    res = []
    for eps in epsilon_list:
        hh = min(h, T / (100 * eps))
        U = T / eps
        horizon = float(system.family.q(system.family.ell, U)) + 1.0
        paths = [sample_path(system.process, horizon, derive_seed(base_seed, m)) for m in range(M)]
        states, sup = simulate_polar(system, paths, eps, T, hh, out_times, zbar)
        energy = states[..., 0] ** 2
        rng = np.random.default_rng(derive_seed(base_seed, 5_000_011))
        idx = rng.integers(0, M, size=(n_boot, M))
        boots = energy[idx].mean(axis=1)
        ci = np.quantile(boots, [0.025, 0.975], axis=0).T
        avg = zbar(out_times)
        res.append(OscillatorEnsemble(float(eps), out_times, states, sup, avg, energy.mean(axis=0), ci, avg[:, 0] ** 2, {"M": M, "h": hh}))
    return res
