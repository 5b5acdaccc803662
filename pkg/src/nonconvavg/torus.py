"""Fully coupled averaging on the torus.

The slow vector ``a`` in R^n drives ``l`` angle variables on T^n with speeds
``i * a`` while ``a' = eps B(a, phi_1, ..., phi_l)``.  Because all angles
start at the same point ``phi``, ``phi_i = i phi_1 - (i - 1) phi`` for all
times, so only ``(a, phi_1)`` needs to be integrated.  Angles are measured
in turns (period 1).

``B`` is a trigonometric polynomial; its average over ``(phi_1, phi)``
keeps exactly the modes whose frequencies vanish in both variables.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .dynamics import integrate_averaged

__all__ = [
    "TorusError",
    "TrigTerm",
    "TrigField",
    "TorusResult",
    "torus_catalog",
    "build_torus_field",
    "run_torus",
]


class TorusError(ValueError):
    pass


@dataclass(frozen=True)
class TrigTerm:
    """``coef * prod(a**a_exps) * trig(2 pi sum_j k_j . phi_j)`` with ``trig`` in {cos, sin}.

    ``coef`` has length ``n`` (one entry per output coordinate), ``k`` has
    shape ``(l, n)``.
    """

    coef: tuple
    k: tuple
    a_exps: tuple = ()
    kind: str = "cos"


@dataclass(eq=False)
class TrigField:
    n: int
    ell: int
    terms: list
    name: str = "trig"

    def __post_init__(self):
        if self.n < 1 or self.ell < 1:
            raise TorusError("torus dimension and number of angles must be positive")
        clean = []
        for t in self.terms:
            if not isinstance(t, TrigTerm):
                try:
                    t = TrigTerm(**t)
                except TypeError as exc:
                    raise TorusError(f"malformed term {t!r}: {exc}") from exc
            if t.kind not in ("cos", "sin"):
                raise TorusError(f"term kind must be 'cos' or 'sin', got {t.kind!r}")
            k = np.asarray(t.k, dtype=float)
            if k.shape != (self.ell, self.n) or np.any(k != np.round(k)):
                raise TorusError(f"frequencies must be an integer ({self.ell}, {self.n}) array")
            if len(t.coef) != self.n:
                raise TorusError(f"coefficients must have length {self.n}")
            exps = t.a_exps or (0,) * self.n
            if len(exps) != self.n or any(int(e) != e or e < 0 for e in exps):
                raise TorusError("a_exps must be nonnegative integers, one per coordinate")
            clean.append(TrigTerm(tuple(map(float, t.coef)), tuple(map(tuple, k.astype(int).tolist())), tuple(int(e) for e in exps), t.kind))
        self.terms = clean
        self._packed = [(np.asarray(t.coef), np.asarray(t.k, dtype=float), np.asarray(t.a_exps, dtype=float), t.kind) for t in clean]

    def _arrays(self, t: TrigTerm):
        return self._packed[self.terms.index(t)][:3]

    def __call__(self, a, phis):
        """``a`` (..., n), ``phis`` (..., l, n) -> (..., n)."""
        out = np.zeros(np.shape(a))
        for coef, k, ex, kind in self._packed:
            phase = 2 * np.pi * (phis * k).sum(axis=(-2, -1))
            trig = np.cos(phase) if kind == "cos" else np.sin(phase)
            if ex.any():
                trig = trig * np.prod(a**ex, axis=-1)
            out += coef * trig[..., None]
        return out

    def reduced(self, a, psi, phi):
        """``B`` with ``phi_i = i psi - (i - 1) phi``."""
        i = np.arange(1, self.ell + 1)[:, None]
        phis = i * psi[..., None, :] - (i - 1) * phi[..., None, :]
        return self(a, phis)

    def mode_frequencies(self, t: TrigTerm):
        """Frequencies in ``psi`` and ``phi`` of a term after the reduction."""
        k = np.asarray(t.k)
        j = np.arange(1, self.ell + 1)[:, None]
        return (j * k).sum(axis=0), ((j - 1) * k).sum(axis=0)

    def locked_modes(self) -> list:
        """Terms constant in ``psi`` but not in ``phi``: they do not average out along a trajectory."""
        out = []
        for idx, t in enumerate(self.terms):
            f_psi, f_phi = self.mode_frequencies(t)
            if not np.any(f_psi) and np.any(f_phi):
                out.append(idx)
        return out

    def bar_B(self, a):
        """Exact average over ``(psi, phi)`` in T^n x T^n."""
        a = np.asarray(a, dtype=float)
        out = np.zeros(a.shape)
        for t in self.terms:
            f_psi, f_phi = self.mode_frequencies(t)
            if np.any(f_psi) or np.any(f_phi) or t.kind == "sin":
                continue
            coef, _, ex = self._arrays(t)
            out = out + coef * np.prod(a**ex, axis=-1)[..., None]
        return out

    def resonance_distance(self, a) -> np.ndarray:
        """``min |f_psi . a|`` over oscillating terms; small values mean slow phases."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        best = np.full(a.shape[0], np.inf)
        for t in self.terms:
            f_psi, _ = self.mode_frequencies(t)
            if np.any(f_psi):
                best = np.minimum(best, np.abs(a @ f_psi))
        return best

    def max_frequency(self, a_max: float) -> float:
        f = [np.abs(self.mode_frequencies(t)[0]).sum() for t in self.terms]
        return float(max(f + [0.0])) * a_max


def _default_field(n: int = 1):
    """a' = 1/2 - a/2 + cos(2 pi phi_2) + sin(2 pi (phi_1 + phi_2)) (per coordinate when n > 1)"""
    terms = []
    for c in range(n):
        e = [0.0] * n
        e[c] = 1.0
        zero_k = [[0] * n, [0] * n]
        terms.append({"coef": tuple(0.5 * v for v in e), "k": zero_k, "a_exps": (0,) * n})
        ex = [0] * n
        ex[c] = 1
        terms.append({"coef": tuple(-0.5 * v for v in e), "k": zero_k, "a_exps": tuple(ex)})
        k1 = [[0] * n, [int(m == c) for m in range(n)]]
        terms.append({"coef": tuple(e), "k": k1, "kind": "cos"})
        k2 = [[int(m == c) for m in range(n)], [int(m == c) for m in range(n)]]
        terms.append({"coef": tuple(e), "k": k2, "kind": "sin"})
    return TrigField(n, 2, terms, "default")


def _phase_free(n: int = 1):
    """a' = 1/2 - a/2 (no angle dependence)"""
    f = _default_field(n)
    return TrigField(n, 2, [t for t in f.terms if not any(any(r) for r in t.k)], "phase_free")


def _locked(n: int = 1):
    """a' = cos(2 pi (2 phi_1 - phi_2)), a mode that stays frozen along trajectories"""
    return TrigField(n, 2, [{"coef": (1.0,) * n, "k": [[2] * n, [-1] * n], "kind": "cos"}], "locked")


_CATALOG = {"default": _default_field, "phase_free": _phase_free, "locked": _locked}


def torus_catalog() -> dict:
    return {k: f.__doc__ or "" for k, f in _CATALOG.items()}


def build_torus_field(name: str = "default", n: int = 1, terms: Sequence | None = None, ell: int = 2) -> TrigField:
    if terms is not None:
        return TrigField(n, ell, list(terms), name)
    if name not in _CATALOG:
        raise TorusError(f"unknown torus field {name!r}; choose from {sorted(_CATALOG)}")
    return _CATALOG[name](n)


@dataclass(eq=False)
class TorusResult:
    epsilons: list
    errors: list  # in-measure error per eps (resonant points excluded)
    errors_all: list  # including resonant points
    per_point: np.ndarray  # (n_eps, n_points)
    points: np.ndarray  # (n_points, 2n): a then phi
    resonant: np.ndarray  # bool per point
    locked_modes: list
    meta: dict = field(default_factory=dict)

    @property
    def strictly_decreasing(self) -> bool:
        e = np.asarray(self.errors)
        return bool(np.all(np.diff(e) < 0))


def _rk4_torus(field_: TrigField, a0, psi0, phi, eps, U, h, abar, record_every: int = 1):
    n_steps = int(np.ceil(U / h))
    h = U / n_steps
    a = a0.copy()
    psi = psi0.copy()
    sup = np.zeros(a.shape[0])

    def f(a_, psi_):
        return eps * field_.reduced(a_, psi_, phi), a_

    for step in range(n_steps):
        k1a, k1p = f(a, psi)
        k2a, k2p = f(a + 0.5 * h * k1a, psi + 0.5 * h * k1p)
        k3a, k3p = f(a + 0.5 * h * k2a, psi + 0.5 * h * k2p)
        k4a, k4p = f(a + h * k3a, psi + h * k3p)
        a = a + (h / 6) * (k1a + 2 * k2a + 2 * k3a + k4a)
        psi = psi + (h / 6) * (k1p + 2 * k2p + 2 * k3p + k4p)
        if not np.all(np.isfinite(a)):
            raise TorusError(f"slow variable became non-finite at fast time {(step + 1) * h:g}")
        if (step + 1) % record_every == 0 or step == n_steps - 1:
            ref = abar((step + 1) * h * eps)
            np.maximum(sup, np.abs(a - ref).max(axis=1), out=sup)
    return sup, n_steps


def run_torus(field_: TrigField, epsilon_list, n_points: int = 64, a_box=(0.5, 1.5), T: float = 1.0, seed: int = 0, steps_per_period: int = 20, resonance_tol: float = 0.05, max_step: float = 0.1, record_every: int = 4) -> TorusResult:
    """In-measure error ``mean over (a, phi) of sup_t |a^eps(t) - abar(eps t)|`` for each eps.

    Initial points fill ``K = a_box^n x T^n`` with a scrambled Sobol
    sequence.  Points whose phase speeds come within ``resonance_tol`` of
    zero are reported but left out of the in-measure error.  The fast
    step resolves the highest phase frequency with ``steps_per_period``
    steps; the sup is taken over every ``record_every``-th step.
    """
    n = field_.n
    if n_points < 1:
        raise TorusError("need at least one initial point")
    sampler = qmc.Sobol(d=2 * n, scramble=True, seed=seed)
    raw = sampler.random(n_points)
    lo, hi = float(a_box[0]), float(a_box[1])
    a0 = lo + (hi - lo) * raw[:, :n]
    phi = raw[:, n:]
    resonant = field_.resonance_distance(a0) < resonance_tol
    abars = [integrate_averaged(field_.bar_B, T, a0[m]) for m in range(n_points)]

    # the averaged paths are sampled on a common grid and interpolated per step
    per_point = []
    errors, errors_all = [], []
    # bound on |a| along the run, used to size the step
    a_max = max(abs(lo), abs(hi)) + 1.0
    freq = max(field_.max_frequency(a_max), 1.0)
    for eps in epsilon_list:
        U = T / eps
        h = min(max_step, 1.0 / (freq * steps_per_period))
        grid_t = np.linspace(0.0, T, 2049)
        table = np.stack([p(grid_t) for p in abars], axis=0)  # (P, G, n)

        def abar_interp(t, _g=grid_t, _tab=table):
            j = min(max(int(np.searchsorted(_g, t) - 1), 0), len(_g) - 2)
            w = (t - _g[j]) / (_g[j + 1] - _g[j])
            return (1 - w) * _tab[:, j] + w * _tab[:, j + 1]

        sup, n_steps = _rk4_torus(field_, a0, phi.copy(), phi, eps, U, h, abar_interp, record_every)
        per_point.append(sup)
        keep = ~resonant
        errors.append(float(sup[keep].mean()) if keep.any() else np.nan)
        errors_all.append(float(sup.mean()))
    return TorusResult(list(map(float, epsilon_list)), errors, errors_all, np.array(per_point), np.hstack([a0, phi]), resonant, field_.locked_modes(), {"T": T, "a_box": [lo, hi], "seed": seed})
