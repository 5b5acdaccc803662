"""Time-scale families ``q_1 < ... < q_l``: linear scales followed by faster ones."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Sequence

import numpy as np

__all__ = [
    "FastScale",
    "TimeScaleFamily",
    "ResonantPair",
    "GrowthConditionError",
    "GrowthReport",
    "validate_growth",
    "resonant_pairs",
    "tau",
    "fast_arguments",
    "switch_times",
]

RATIO_RTOL = 1e-12


class GrowthConditionError(ValueError):
    """A time scale is not strictly increasing or is otherwise malformed."""


@dataclass(frozen=True)
class FastScale:
    """One superlinear scale from a small catalog.

    kind ``"power"``:      ``t**p + shift * t`` with ``p > 1``
    kind ``"tlog"``:       ``t * log(1 + t) + shift * t`` (shift defaults to alpha_k)
    kind ``"polynomial"``: ``sum(c_n * t**n)``; only used to build counterexamples
    """

    kind: str
    p: float = 2.0
    shift: float | None = None
    coeffs: tuple = ()

    def __post_init__(self):
        if self.kind not in ("power", "tlog", "polynomial"):
            raise GrowthConditionError(f"unknown fast-scale kind {self.kind!r}")
        if self.kind == "power" and self.p <= 0:
            raise GrowthConditionError("power scale needs p > 0")
        if self.kind == "polynomial" and not self.coeffs:
            raise GrowthConditionError("polynomial scale needs coefficients")

    def _shift(self, alpha_k: float) -> float:
        if self.shift is not None:
            return float(self.shift)
        return float(alpha_k) if self.kind == "tlog" else 0.0

    def value(self, t, alpha_k: float):
        t = np.asarray(t, dtype=float)
        c = self._shift(alpha_k)
        if self.kind == "power":
            return t**self.p + c * t
        if self.kind == "tlog":
            return t * np.log1p(t) + c * t
        return np.polynomial.polynomial.polyval(t, np.asarray(self.coeffs, dtype=float))

    def derivative(self, t, alpha_k: float):
        t = np.asarray(t, dtype=float)
        c = self._shift(alpha_k)
        if self.kind == "power":
            return self.p * t ** (self.p - 1) + c
        if self.kind == "tlog":
            return np.log1p(t) + t / (1 + t) + c
        der = np.polynomial.polynomial.polyder(np.asarray(self.coeffs, dtype=float))
        return np.polynomial.polynomial.polyval(t, der)

    def inverse(self, y, alpha_k: float):
        y = np.asarray(y, dtype=float)
        c = self._shift(alpha_k)
        if self.kind == "power" and c == 0:
            return y ** (1.0 / self.p)
        # safeguarded Newton on a monotone function with q(0) = 0
        lo = np.zeros_like(y)
        hi = np.maximum(1.0, y)
        while np.any(self.value(hi, alpha_k) < y):
            hi = np.where(self.value(hi, alpha_k) < y, 2 * hi, hi)
        t = 0.5 * (lo + hi)
        for _ in range(200):
            f = self.value(t, alpha_k) - y
            lo = np.where(f < 0, t, lo)
            hi = np.where(f >= 0, t, hi)
            d = self.derivative(t, alpha_k)
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = t - f / d
            bad = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
            t_new = np.where(bad, 0.5 * (lo + hi), newton)
            if np.all(np.abs(t_new - t) <= 1e-15 * np.maximum(1.0, np.abs(t))):
                t = t_new
                break
            t = t_new
        return t

    def describe(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "power":
            out["p"] = self.p
        if self.shift is not None:
            out["shift"] = self.shift
        if self.kind == "polynomial":
            out["coeffs"] = list(self.coeffs)
        return out


def _as_rate(a):
    if isinstance(a, Rational):
        return Fraction(a)
    if isinstance(a, str):
        return Fraction(a)
    return float(a)


@dataclass(frozen=True)
class TimeScaleFamily:
    """``k`` linear rates ``alphas`` followed by superlinear ``fast`` scales.

    Scale indices are 1-based throughout, matching ``B_1, ..., B_l``.
    Rates given as ints, Fractions or strings like ``"3/2"`` are kept exact so
    that resonances are decided in rational arithmetic.
    """

    alphas: tuple
    fast: tuple = field(default_factory=tuple)

    def __post_init__(self):
        alphas = tuple(_as_rate(a) for a in self.alphas)
        if not alphas:
            raise GrowthConditionError("at least one linear scale is required")
        if any(a <= 0 for a in alphas):
            raise GrowthConditionError("linear rates must be positive")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise GrowthConditionError("linear rates must be strictly increasing")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "fast", tuple(self.fast))

    @property
    def k(self) -> int:
        return len(self.alphas)

    @property
    def ell(self) -> int:
        return self.k + len(self.fast)

    @property
    def alpha_floats(self) -> np.ndarray:
        return np.array([float(a) for a in self.alphas])

    @property
    def exact(self) -> bool:
        return all(isinstance(a, Fraction) for a in self.alphas)

    def _check(self, i: int):
        if not 1 <= i <= self.ell:
            raise IndexError(f"scale index {i} outside 1..{self.ell}")

    def q(self, i: int, t):
        """Value of the i-th scale at (array of) time(s) ``t``."""
        self._check(i)
        if i <= self.k:
            return float(self.alphas[i - 1]) * np.asarray(t, dtype=float)
        return self.fast[i - self.k - 1].value(t, float(self.alphas[-1]))

    def dq(self, i: int, t):
        self._check(i)
        if i <= self.k:
            return np.full_like(np.asarray(t, dtype=float), float(self.alphas[i - 1]))
        return self.fast[i - self.k - 1].derivative(t, float(self.alphas[-1]))

    def q_inverse(self, i: int, y):
        self._check(i)
        if i <= self.k:
            return np.asarray(y, dtype=float) / float(self.alphas[i - 1])
        return self.fast[i - self.k - 1].inverse(y, float(self.alphas[-1]))

    def q_all(self, t) -> np.ndarray:
        """Stack of all scales, shape ``(l,) + shape(t)``."""
        return np.stack([self.q(i, t) for i in range(1, self.ell + 1)])

    def describe(self) -> dict:
        return {
            "alphas": [str(a) if isinstance(a, Fraction) else a for a in self.alphas],
            "fast": [f.describe() for f in self.fast],
        }


@dataclass(frozen=True)
class ResonantPair:
    i_prime: int
    j_prime: int
    rho: float | Fraction


def _same_ratio(a1, a2, b1, b2) -> bool:
    if all(isinstance(v, Fraction) for v in (a1, a2, b1, b2)):
        return a1 * b2 == b1 * a2
    lhs = float(a1) / float(a2)
    rhs = float(b1) / float(b2)
    return abs(lhs - rhs) <= RATIO_RTOL * max(abs(lhs), abs(rhs))


def resonant_pairs(family: TimeScaleFamily, i: int, j: int) -> list[ResonantPair]:
    """All ``(i', j')`` with ``alpha_i'/alpha_i == alpha_j'/alpha_j``, by increasing ratio.

    The last entry is always ``(i, j, 1)``.
    """
    k = family.k
    if not (1 <= i <= k and 1 <= j <= k):
        raise IndexError("resonant pairs are defined for linear scales only")
    al = family.alphas
    out = []
    for ip in range(1, i + 1):
        for jp in range(1, j + 1):
            if _same_ratio(al[ip - 1], al[i - 1], al[jp - 1], al[j - 1]):
                rho = al[ip - 1] / al[i - 1]
                if not isinstance(rho, Fraction):
                    rho = float(rho)
                out.append(ResonantPair(ip, jp, rho))
    out.sort(key=lambda p: float(p.rho))
    return out


def tau(family: TimeScaleFamily, i: int, t):
    """Natural time of the i-th component: ``t / alpha_i`` for linear scales, else ``t``."""
    family._check(i)
    if i <= family.k:
        return np.asarray(t, dtype=float) / float(family.alphas[i - 1])
    return np.asarray(t, dtype=float)


def fast_arguments(path, family: TimeScaleFamily, t) -> np.ndarray:
    """``(xi(q_1(t)), ..., xi(q_l(t)))`` stacked to shape ``shape(t) + (l, wp)``.

    For discrete-time processes the scale values are floored to integers.
    """
    t = np.asarray(t, dtype=float)
    discrete = path.spec.is_discrete
    out = []
    for i in range(1, family.ell + 1):
        q = family.q(i, t)
        if discrete:
            q = np.floor(q + 1e-9)
        out.append(path(q))
    return np.stack(out, axis=-2)


def switch_times(path, family: TimeScaleFamily, t0: float, t1: float) -> np.ndarray:
    """Sorted times in (t0, t1) where some ``xi(q_i(t))`` may change value."""
    pieces = []
    for i in range(1, family.ell + 1):
        lo, hi = float(family.q(i, t0)), float(family.q(i, t1))
        tau_i = path.jumps_in(lo, hi)
        if tau_i.size:
            pieces.append(family.q_inverse(i, tau_i))
    if not pieces:
        return np.empty(0)
    out = np.unique(np.concatenate(pieces))
    return out[(out > t0) & (out < t1)]


@dataclass
class GrowthReport:
    """Observed increments of each fast scale on a geometric time grid."""

    valid: bool
    rows: list = field(default_factory=list)
    ordering_violations: list = field(default_factory=list)

    def failures(self) -> list:
        return [r for r in self.rows if not (r["shift_diverges"] and r["separation_diverges"])]


def _diverging(values: np.ndarray) -> bool:
    tail = values[len(values) * 2 // 3:]
    return bool(np.all(np.diff(tail) > 0) and tail[-1] > 1.0)


def validate_growth(family: TimeScaleFamily, gamma_grid: Sequence[float], horizon: float, n_grid: int = 200) -> GrowthReport:
    """Check that every fast scale keeps accelerating and outruns its predecessor.

    For each superlinear index ``i`` and each ``gamma`` this records the
    smallest observed ``q_i(t+gamma) - q_i(t)`` and ``q_i(gamma t) - q_{i-1}(t)``
    on a geometric grid up to ``horizon`` and flags whether each sequence is
    increasing without bound over the upper third of the grid.

    Raises
    ------
    GrowthConditionError
        If some scale is not strictly increasing on the grid.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    t = np.geomspace(min(1e-3, horizon / 10), horizon, n_grid)
    for i in range(1, family.ell + 1):
        vals = family.q(i, t)
        if np.any(np.diff(vals) <= 0) or np.any(family.dq(i, t) <= 0):
            raise GrowthConditionError(f"time scale q_{i} is not strictly increasing")
    violations = []
    for i in range(2, family.ell + 1):
        bad = t[family.q(i, t) <= family.q(i - 1, t)]
        if bad.size:
            violations.append({"index": i, "last_violation": float(bad.max())})
    rows = []
    for i in range(family.k + 1, family.ell + 1):
        for g in gamma_grid:
            shift = family.q(i, t + g) - family.q(i, t)
            sep = family.q(i, g * t) - family.q(i - 1, t)
            rows.append(
                {
                    "index": i,
                    "gamma": float(g),
                    "min_shift_increment": float(shift.min()),
                    "min_separation": float(sep.min()),
                    "shift_diverges": _diverging(shift),
                    "separation_diverges": _diverging(sep),
                }
            )
    valid = all(r["shift_diverges"] and r["separation_diverges"] for r in rows)
    return GrowthReport(valid, rows, violations)
