"""Mixing and approximation coefficients of the fast process.

Chains are filtered by their own state history, so every conditional
expectation given ``F_t`` is a function of the current state (Markov
property) or, for path functionals, of finitely many past states.  The
doubling map is filtered by the leading binary digits of the initial point:
``F_m`` knows digits ``1..m`` of ``x_0``, i.e. the first ``m - t`` digits of
``x_t``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import AveragedPath, integrate_averaged
from .fast_process import (
    DyadicMapSpec,
    FiniteChainSpec,
    sample_path,
    spectral_gap,
    stationary_vector,
    transition_kernels,
)
from .field import DecomposedField
from .time_scales import TimeScaleFamily

__all__ = [
    "MixingError",
    "CoefficientValue",
    "CoefficientSeries",
    "CoefficientTable",
    "holder_norm",
    "eta_coeff",
    "zeta_coeff",
    "phi_coeff",
    "beta_coeff",
    "coefficient_table",
    "AssumptionReport",
    "check_assumption",
    "TwoParameterReport",
    "two_param_compare",
    "MartingaleCheck",
    "martingale_difference_check",
]

DEFAULT_OFFSETS = tuple(np.round(np.arange(10) / 10, 12))
DYADIC_EXACT_MAX = 18
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_PR_TOL = 1e-15


class MixingError(ValueError):
    """Unsupported process or malformed coefficient request."""


@dataclass(frozen=True)
class CoefficientValue:
    value: float
    method: str  # "exact" | "upper-bound" | "empirical"


@dataclass
class CoefficientSeries:
    """One coefficient as a function of ``n`` with a method tag per entry."""

    kind: str
    params: dict
    n: np.ndarray
    values: np.ndarray
    methods: tuple

    def label(self) -> str:
        inner = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.kind}[{inner}]" if inner else self.kind

    def rows(self) -> list[tuple[int, float]]:
        return list(zip(self.n.tolist(), self.values.tolist()))


@dataclass
class CoefficientTable:
    series: list = field(default_factory=list)

    def get(self, kind: str, **params) -> list[CoefficientSeries]:
        return [
            s for s in self.series
            if s.kind == kind and all(np.isclose(s.params.get(k, np.nan), v) for k, v in params.items())
        ]

    def kinds(self) -> set:
        return {s.kind for s in self.series}

    @property
    def n_max(self) -> int:
        return int(max(s.n.max() for s in self.series)) if self.series else -1

    def monotone_violations(self, tol: float = 1e-12) -> list[str]:
        """Labels of eta/zeta series whose exact entries increase with ``n``."""
        out = []
        for s in self.series:
            if s.kind not in ("eta", "zeta"):
                continue
            exact = np.array([m == "exact" for m in s.methods])
            v = s.values[exact]
            if v.size > 1 and np.any(np.diff(v) > tol):
                out.append(s.label())
        return out


# ---------------------------------------------------------------------------
# Hoelder norm


def holder_norm(values, grids: Sequence, kappa: float, chunk: int = 2048) -> float:
    """Discrete version of ``sup |g| + |g(P) - g(P')| / sum_j |P_j - P'_j|**kappa``.

    ``values`` holds ``g`` on the tensor grid spanned by ``grids`` (one 1-D
    array per argument).  Only grid pairs are compared, so the result is a
    lower bound of the true norm.
    """
    values = np.asarray(values, dtype=float)
    if isinstance(grids, np.ndarray) and grids.ndim == 1:
        grids = [grids]
    grids = [np.asarray(g, dtype=float).ravel() for g in grids]
    if values.size == 0 or any(g.size == 0 for g in grids):
        raise MixingError("empty grid")
    if values.shape != tuple(g.size for g in grids):
        raise MixingError(f"values shape {values.shape} does not match the grids")
    if values.size < 2:
        raise MixingError("need at least two grid points")
    mesh = np.stack([m.ravel() for m in np.meshgrid(*grids, indexing="ij")], axis=1)
    g = values.ravel()
    best = float(np.max(np.abs(g)))
    for lo in range(0, len(g), chunk):
        pts = mesh[lo:lo + chunk]
        dist = (np.abs(pts[:, None, :] - mesh[None, :, :]) ** kappa).sum(axis=-1)
        diff = np.abs(g[lo:lo + chunk, None] - g[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, diff / dist, 0.0)
        best = max(best, float(np.max(np.abs(g[lo:lo + chunk, None]) + ratio)))
    return best


# ---------------------------------------------------------------------------
# chain helpers


def _pr_laws(chain: FiniteChainSpec, max_steps: int = 100_000) -> np.ndarray:
    """Laws of the state at integer times ``0, 1, ...`` under Pr until they reach pi.

    The stationary law is appended last so that the supremum over ``t`` also
    covers the limit.
    """
    pi = stationary_vector(chain)
    K1 = transition_kernels(chain, [1.0])[0]
    laws = [chain.initial_law.copy()]
    while np.abs(laws[-1] - pi).sum() > _PR_TOL and len(laws) < max_steps:
        laws.append(laws[-1] @ K1)
    laws.append(pi)
    return np.array(laws)


def _offsets(chain, offsets) -> np.ndarray:
    if chain.is_discrete:
        return np.zeros(1)
    off = np.asarray(offsets, dtype=float)
    if np.any(off < 0) or np.any(off >= 1):
        raise MixingError("fractional offsets must lie in [0, 1)")
    return off


def _tv_rows(chain: FiniteChainSpec, lags) -> np.ndarray:
    """``||delta_a K_u - pi||_1`` for every start state, shape ``(len(lags), n)``."""
    pi = stationary_vector(chain)
    K = transition_kernels(chain, lags)
    return np.abs(K - pi[None, None, :]).sum(axis=-1)


def _lp_sup(laws: np.ndarray, rows: np.ndarray, p: float) -> float:
    """``sup over laws and rows`` of ``(sum_a w(a) rows(a)**p)**(1/p)``."""
    if np.isinf(p):
        support = laws > 0
        return float(max(np.max(np.where(support, r[None, :], 0.0)) for r in rows))
    vals = (laws @ (rows**p).T) ** (1.0 / p)
    return float(np.max(vals))


def _require(process, *types):
    if not isinstance(process, types):
        raise MixingError(f"unsupported process {type(process).__name__}")


# ---------------------------------------------------------------------------
# coefficients


def eta_coeff(process, p: float, kappa: float, s: float, n: int, offsets=DEFAULT_OFFSETS) -> CoefficientValue:
    """Mixing coefficient ``eta_{p,kappa,s}(n)``.

    Chains: the total-variation bound ``2 * ||law(X(n+t), X(n+t+s) | X([t])) - mu_s||_TV``,
    in ``L^p(Pr)`` over the state at ``[t]``, maximized over integer ``[t]``
    and the fractional offsets.  The pair law given the state differs from
    ``mu_s`` only through the first coordinate, so the bound does not
    depend on ``s``.  Valid because ``|g|_kappa <= 1`` forces ``|g| <= 1``.

    Doubling map: ``x_{t+n}`` only involves digits beyond ``t`` and those are
    independent of ``F_t``, so the value is exactly 0.
    """
    _require(process, FiniteChainSpec, DyadicMapSpec)
    if n < 0:
        raise MixingError("n must be nonnegative")
    if s < 0:
        raise MixingError("lag s must be nonnegative")
    if isinstance(process, DyadicMapSpec):
        return CoefficientValue(0.0, "exact")
    if process.n_states == 1:
        return CoefficientValue(0.0, "exact")
    off = _offsets(process, offsets)
    rows = _tv_rows(process, n + off)
    return CoefficientValue(_lp_sup(_pr_laws(process), rows, p), "upper-bound")


def _dyadic_zeta_exact(spec: DyadicMapSpec, q: float, n: int) -> float:
    h = 2.0**-n
    left = np.arange(2**n) * h
    nodes = left[:, None] + 0.5 * h * (_GL_X[None, :] + 1.0)
    vals = spec.evaluate(nodes.ravel()).reshape(2**n, len(_GL_X), -1)
    w = 0.5 * _GL_W
    mean = np.einsum("k,ikd->id", w, vals)
    dev = np.linalg.norm(vals - mean[:, None, :], axis=-1)
    if np.isinf(q):
        return float(dev.max())
    return float((h * np.einsum("k,ik->", w, dev**q)) ** (1.0 / q))


def zeta_coeff(process, q: float, n: int, offsets=DEFAULT_OFFSETS) -> CoefficientValue:
    """Approximation coefficient ``zeta_q(n) = sup_t ||E(xi(t) | F_{[t]+n}) - xi(t)||_q``.

    Chains with an instantaneous observable: ``xi(t)`` is ``F_{[t]+1}``
    measurable, so the value is 0 for ``n >= 1``; for ``n = 0`` the fractional
    offsets are scanned exactly.

    Doubling map: given ``F_{t+n}`` the point ``x_t`` is uniform on a known
    dyadic interval of length ``2**-n``; the deviation from the interval
    mean is integrated with Gauss-Legendre nodes (exact for polynomial
    observables) up to ``n = 18`` and replaced by the Hoelder bound
    ``C * 2**(-n kappa)`` beyond.
    """
    _require(process, FiniteChainSpec, DyadicMapSpec)
    if n < 0:
        raise MixingError("n must be nonnegative")
    if isinstance(process, DyadicMapSpec):
        if n > DYADIC_EXACT_MAX:
            return CoefficientValue(process.holder_constant * 2.0 ** (-n * process.holder_exponent), "upper-bound")
        return CoefficientValue(_dyadic_zeta_exact(process, q, n), "exact")
    if n >= 1 or process.n_states == 1:
        return CoefficientValue(0.0, "exact")
    off = _offsets(process, offsets)
    K = transition_kernels(process, off)
    obs = process.observable
    cond_mean = K @ obs  # (F, n, wp)
    dev = np.linalg.norm(cond_mean[:, :, None, :] - obs[None, None, :, :], axis=-1)  # (F, a, b)
    laws = _pr_laws(process)
    if np.isinf(q):
        val = max(float(np.max(np.where(K[f] > 0, dev[f], 0.0) * (laws.max(axis=0)[:, None] > 0))) for f in range(len(off)))
        return CoefficientValue(val, "exact")
    per_state = np.einsum("fab,fab->fa", K, dev**q)
    return CoefficientValue(float(np.max(laws @ per_state.T) ** (1.0 / q)), "exact")


def phi_coeff(process, p: float, n: int, offsets=DEFAULT_OFFSETS) -> CoefficientValue:
    """Two-parameter coefficient ``phi_p(n)`` with ``G_{s,t}`` generated by the chain on ``[s, t]``.

    Given the past up to ``s`` the future after ``s + n`` depends only on
    ``X(s + n)``, whose conditional law is ``delta_{X(s)} K_n``; the supremum
    over ``|g| <= 1`` is then exactly twice the total variation.  The outer
    supremum over ``s`` is taken on integers plus the fractional offsets.
    """
    _require(process, FiniteChainSpec)
    if n < 0:
        raise MixingError("n must be nonnegative")
    if process.n_states == 1:
        return CoefficientValue(0.0, "exact")
    rows = _tv_rows(process, [float(n)])
    laws = _pr_laws(process)
    off = _offsets(process, offsets)
    if np.any(off > 0):
        Koff = transition_kernels(process, off)
        laws = np.einsum("ma,fab->fmb", laws[:-1], Koff).reshape(-1, process.n_states)
        laws = np.vstack([laws, stationary_vector(process)])
    return CoefficientValue(_lp_sup(laws, rows, p), "exact")


def beta_coeff(process, q: float, n: int) -> CoefficientValue:
    """``beta_q(n)``: zero for chains since ``xi(t)`` is ``G_{t-n,t+n}`` measurable."""
    _require(process, FiniteChainSpec)
    if n < 0:
        raise MixingError("n must be nonnegative")
    return CoefficientValue(0.0, "exact")


def coefficient_table(process, n_max: int = 30, p_values=(4.0, 8.0, 16.0), q_values=(2.0, 4.0), kappa: float = 1.0, lags=(0.0,), offsets=DEFAULT_OFFSETS, two_parameter: bool | None = None) -> CoefficientTable:
    """Tabulate eta for every ``(p, s)``, zeta for every ``q`` and, for chains, phi and beta."""
    _require(process, FiniteChainSpec, DyadicMapSpec)
    ns = np.arange(n_max + 1)
    table = CoefficientTable()

    def add(kind, params, func):
        vals = [func(int(k)) for k in ns]
        table.series.append(
            CoefficientSeries(kind, params, ns.copy(), np.array([v.value for v in vals]), tuple(v.method for v in vals))
        )

    for p in p_values:
        for s in lags:
            add("eta", {"p": p, "kappa": kappa, "s": s}, lambda k: eta_coeff(process, p, kappa, s, k, offsets))
    for q in q_values:
        add("zeta", {"q": q}, lambda k: zeta_coeff(process, q, k, offsets))
    if two_parameter is None:
        two_parameter = isinstance(process, FiniteChainSpec)
    if two_parameter:
        for p in p_values:
            add("phi", {"p": p}, lambda k: phi_coeff(process, p, k, offsets))
        for q in q_values:
            add("beta", {"q": q}, lambda k: beta_coeff(process, q, k))
    return table


# ---------------------------------------------------------------------------
# summability


@dataclass
class AssumptionReport:
    verdict: str  # "pass" | "fail" | "inconclusive"
    best: dict | None
    candidates: list
    reason: str = ""

    def as_dict(self) -> dict:
        return {"verdict": self.verdict, "best": self.best, "reason": self.reason, "n_candidates": len(self.candidates)}


def _tail_fit(terms: np.ndarray) -> dict:
    """Partial sum of ``terms[1:]`` plus a fitted tail (geometric or power law)."""
    n = np.arange(len(terms), dtype=float)
    partial = float(terms.sum())
    tail_idx = np.arange(len(terms) // 2, len(terms))
    t = terms[tail_idx]
    if np.all(t <= 1e-300):
        return {"partial_sum": partial, "tail": 0.0, "model": "zero", "rate": 0.0, "summable": True, "clear": True}
    pos = t > 1e-300
    if pos.sum() < 3:
        return {"partial_sum": partial, "tail": 0.0, "model": "sparse", "rate": np.nan, "summable": True, "clear": False}
    x_lin = n[tail_idx][pos]
    y = np.log(t[pos])
    geo = np.polyfit(x_lin, y, 1, full=True)
    pow_ = np.polyfit(np.log(x_lin), y, 1, full=True)
    res_geo = float(geo[1][0]) if len(geo[1]) else 0.0
    res_pow = float(pow_[1][0]) if len(pow_[1]) else 0.0
    last = float(terms[-1])
    N = float(n[-1])
    if res_geo <= res_pow:
        ratio = float(np.exp(geo[0][0]))
        summable = ratio < 1.0
        clear = ratio <= 0.999 or ratio >= 1.0
        tail = last * ratio / (1.0 - ratio) if summable else np.inf
        return {"partial_sum": partial, "tail": tail, "model": "geometric", "rate": ratio, "summable": summable, "clear": clear}
    beta = float(pow_[0][0])
    summable = beta < -1.0
    clear = beta <= -1.05 or beta >= -0.95
    tail = last * N / (-beta - 1.0) if summable else np.inf
    return {"partial_sum": partial, "tail": tail, "model": "power", "rate": beta, "summable": summable, "clear": clear}


def check_assumption(table: CoefficientTable, kappa: float, ell: int, wp: int, m_moment: float = np.inf, n_delta: int = 6, n_theta: int = 6) -> AssumptionReport:
    """Search admissible ``(p, q, delta, theta)`` and test summability of ``n (eta^(1 - rho/(p theta)) + zeta_q^delta)``.

    ``rho = (l - 1) wp``.  The moment bound ``gamma_m`` is taken as finite
    (bounded observables); ``m_moment = inf`` drops the ``2/m`` term.
    Passes when some admissible tuple gives a summable series, fails when
    admissible tuples exist and none does.
    """
    eta = table.get("eta")
    zeta = table.get("zeta")
    if not eta or not zeta:
        raise MixingError("table needs both eta and zeta series")
    if table.n_max < 20:
        raise MixingError("table must extend to n >= 20")
    rho = (ell - 1) * wp
    inv_m = 0.0 if np.isinf(m_moment) else 2.0 / m_moment
    # eta_{p,kappa}(n) is the supremum over the tabulated lags
    eta_by_p: dict = {}
    for s in eta:
        p = s.params["p"]
        eta_by_p[p] = s.values if p not in eta_by_p else np.maximum(eta_by_p[p], s.values)
    candidates = []
    for p, ev in sorted(eta_by_p.items()):
        if not rho / p < kappa:
            continue
        for zs in zeta:
            q = zs.params["q"]
            if not kappa * q > 1:
                continue
            d_hi = min(kappa - rho / p, q * (0.5 - 1.0 / p - inv_m))
            if d_hi <= 0:
                continue
            for delta in np.linspace(0, d_hi, n_delta + 2)[1:-1]:
                for theta in np.linspace(rho / p, kappa, n_theta + 2)[1:-1]:
                    gexp = 1.0 - rho / (p * theta)
                    n = np.arange(len(ev), dtype=float)
                    terms = n * (np.maximum(ev, 0.0) ** gexp + np.maximum(zs.values, 0.0) ** delta)
                    fit = _tail_fit(terms)
                    candidates.append({"p": p, "q": q, "delta": float(delta), "theta": float(theta), **fit})
    if not candidates:
        return AssumptionReport("inconclusive", None, [], "no admissible (p, q, delta, theta) for the tabulated p and q")
    good = [c for c in candidates if c["summable"] and c["clear"]]
    if good:
        best = min(good, key=lambda c: c["partial_sum"] + c["tail"])
        return AssumptionReport("pass", best, candidates)
    if all(not c["summable"] and c["clear"] for c in candidates):
        return AssumptionReport("fail", None, candidates, "every admissible tuple gives a divergent series")
    return AssumptionReport("inconclusive", None, candidates, "tail fits are not decisive")


# ---------------------------------------------------------------------------
# two-parameter comparison


@dataclass
class TwoParameterReport:
    n: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    phi: np.ndarray
    beta: np.ndarray
    lower_holds: np.ndarray  # beta(n) >= zeta(n+1) / 2
    upper_holds: np.ndarray  # eta(n) <= phi([n/2]) + 2 beta([n/2])**kappa

    @property
    def holds(self) -> bool:
        return bool(self.lower_holds.all() and self.upper_holds.all())


def two_param_compare(process, p: float, q: float, n: int, kappa: float = 1.0, offsets=DEFAULT_OFFSETS) -> TwoParameterReport:
    """Evaluate both comparison inequalities for ``0 <= k <= n``.

    The right-hand side of the upper inequality carries ``|g|_kappa <= 1``.
    Only chains provide the two-parameter filtration.
    """
    _require(process, FiniteChainSpec)
    ks = np.arange(n + 1)
    eta = np.array([eta_coeff(process, p, kappa, 0.0, int(k), offsets).value for k in ks])
    zeta = np.array([zeta_coeff(process, q, int(k) + 1, offsets).value for k in ks])
    phi = np.array([phi_coeff(process, p, int(k), offsets).value for k in ks])
    beta = np.array([beta_coeff(process, p * kappa, int(k)).value for k in ks])
    half = ks // 2
    lower = beta >= 0.5 * zeta
    upper = eta <= phi[half] + 2 * beta[half] ** kappa + 1e-15
    return TwoParameterReport(ks, eta, zeta, phi, beta, lower, upper)


# ---------------------------------------------------------------------------
# martingale differences


@dataclass
class MartingaleCheck:
    """``E(D_{i,N,r}(m) | F_{m-1+r})`` over sampled histories."""

    residual: float
    tail_bound: float
    rounding_allowance: float
    L: int
    n_histories: int
    values: np.ndarray

    @property
    def passed(self) -> bool:
        return self.residual <= self.tail_bound + self.rounding_allowance


def _default_L(chain: FiniteChainSpec) -> int:
    gap = spectral_gap(chain)
    if np.isinf(gap):
        return 1
    if not gap > 0:
        raise MixingError("chain has no spectral gap")
    return max(1, int(np.ceil(np.log(1e12) / gap)))


def _breakpoints(lo, hi, alphas, path_jumps, T_values, r, zbar_knots_s):
    pts = [np.array([lo, hi])]
    for a in alphas:
        pts.append(np.asarray(T_values, dtype=float) / a)
        pts.append(path_jumps / a)
        if r == 0:
            pts.append(np.arange(np.floor(a * lo), np.ceil(a * hi) + 1) / a)
    pts.append(zbar_knots_s)
    allp = np.unique(np.concatenate(pts))
    return allp[(allp >= lo) & (allp <= hi)]


class _Integrand:
    """Conditional expectations of ``B_{i,r}(Zbar(s/N), xi_r(q_1 s), ..., xi(q_i s))`` at nodes ``s``."""

    def __init__(self, decomposed, chain, alphas, i, N, r, zbar):
        self.dec = decomposed
        self.chain = chain
        self.alphas = np.asarray(alphas[:i], dtype=float)
        self.i = i
        self.N = N
        self.r = r
        self.zbar = zbar
        self.n = chain.n_states
        self.obs = chain.observable

    def _times(self, s):
        t = s[:, None] * self.alphas[None, :]
        if self.r == 0:
            return np.minimum(t, np.floor(t)), t
        return t, t  # [t] + r >= t when r >= 1

    def expect(self, s, history, T, pivot=None):
        """``E(integrand(s) | F_T)``, computed through ``F_pivot`` when given."""
        s = np.asarray(s, dtype=float)
        u, t = self._times(s)
        out = np.empty((len(s), self.dec.d))
        known = u <= T + 1e-12
        known_states = np.where(known, history.state_at(np.minimum(u, T)), -1)
        mid = np.round(u, 12)
        if pivot is not None:
            # slot structure: unknown times in (T, pivot], the pivot, then later ones
            keys = np.concatenate([known, known_states, mid > pivot + 1e-12, (mid <= pivot + 1e-12) & ~known], axis=1)
        else:
            keys = np.concatenate([known, known_states], axis=1)
        # ordering and ties of the unknown times are constant between breakpoints
        order_key = np.argsort(np.argsort(mid, axis=1, kind="stable"), axis=1)
        keys = np.concatenate([keys, order_key], axis=1)
        _, groups = np.unique(keys, axis=0, return_inverse=True)
        x = self.zbar(s / self.N)
        for g in np.unique(groups):
            sel = np.flatnonzero(groups.ravel() == g)
            out[sel] = self._group(s[sel], u[sel], t[sel], known[sel[0]], known_states[sel[0]], x[sel], T, history, pivot)
        return out

    def _group(self, s, u, t, known, kstates, x, T, history, pivot):
        S, i, n = len(s), self.i, self.n
        unk = np.flatnonzero(~known)
        # slots: sorted distinct unknown times (ties merged), optionally with the pivot
        slot_times = []
        owner = {}
        for j in sorted(unk, key=lambda j: u[0, j]):
            for k, st in enumerate(slot_times):
                if st[0] is not None and np.allclose(u[:, j], st[0], rtol=0, atol=1e-12):
                    owner[j] = k
                    break
            else:
                owner[j] = len(slot_times)
                slot_times.append((u[:, j], j))
        pivot_slot = None
        if pivot is not None:
            times = [st[0] for st in slot_times]
            pos = int(sum(float(tt[0]) <= pivot + 1e-12 for tt in times))
            match = [k for k, tt in enumerate(times) if np.allclose(tt, pivot, atol=1e-12)]
            if match:
                pivot_slot = match[0]
            else:
                slot_times.insert(pos, (np.full(S, float(pivot)), None))
                owner = {j: (k + 1 if k >= pos else k) for j, k in owner.items()}
                pivot_slot = pos
        n_slots = len(slot_times)
        if n**n_slots * S > 5_000_000:
            raise MixingError("conditional-expectation tensor over budget")
        # integrand tensor over slot states, shape (S, n, ..., n)
        combos = np.array(list(itertools.product(range(n), repeat=n_slots)), dtype=np.int64).reshape(-1, n_slots)
        C = len(combos)
        states = np.empty((C, i), dtype=np.int64)
        for j in range(i):
            states[:, j] = kstates[j] if known[j] else combos[:, owner[j]]
        # smoothing kernels for r = 0 (identity when u == t)
        lag = t - u  # (S, i)
        Ks = transition_kernels(self.chain, lag.ravel()).reshape(S, i, n, n)
        args = np.empty((S, C, i, self.chain.dim))
        for j in range(i - 1):
            means = Ks[:, j] @ self.obs  # (S, n, wp)
            args[:, :, j, :] = means[:, states[:, j], :]
        xb = np.broadcast_to(x[:, None, :], (S, C, x.shape[-1]))
        F = np.zeros((S, C, self.dec.d))
        wlast = Ks[:, i - 1][:, states[:, i - 1], :]  # (S, C, n)
        for b in range(n):
            args[:, :, i - 1, :] = self.obs[b]
            F += wlast[:, :, b, None] * self.dec.component(i, xb, args)
        F = F.reshape((S,) + (n,) * n_slots + (self.dec.d,))
        # backward contraction along the slot chain, anchored at X(T)
        slot_t = [st[0] for st in slot_times]
        start_state = int(history.state_at(T))
        V = F
        # slots after the pivot are contracted first (the inner expectation
        # given F_pivot), then the pivot and earlier slots (the outer one)
        for k in range(n_slots - 1, 0, -1):
            K = transition_kernels(self.chain, np.maximum(slot_t[k] - slot_t[k - 1], 0.0))
            V = np.einsum("s...pcd,spc->s...pd", V, K)
        if n_slots:
            K0 = transition_kernels(self.chain, np.maximum(slot_t[0] - T, 0.0))
            V = np.einsum("sad,sa->sd", V, K0[:, start_state, :])
        return V.reshape(S, self.dec.d)


def martingale_difference_check(decomposed: DecomposedField, chain: FiniteChainSpec, family: TimeScaleFamily, i: int, N: int, r: int, m: int, L: int | None = None, x0=None, zbar: AveragedPath | None = None, n_histories: int = 16, seed: int = 0) -> MartingaleCheck:
    """Conditional mean of the martingale difference ``D_{i,N,r}(m)`` given ``F_{m-1+r}``.

    ``R_{i,r}(m)`` is truncated to ``l = m+1..m+L``.  Every conditional
    expectation is evaluated by summing over chain states at the finitely
    many times that enter the integrand, with Gauss-Legendre nodes in
    ``s`` between all discontinuities.  ``E(R(m) | F_{m-1+r})`` is computed as
    an expectation of ``E(. | F_{m+r})`` over the states at times in
    ``(m-1+r, m+r]``, not by the tower property.  The result should vanish up
    to the omitted terms, whose size is returned as ``tail_bound``.
    """
    if not isinstance(chain, FiniteChainSpec):
        raise MixingError("martingale differences are computed for finite-state chains only")
    if not 1 <= i <= family.k:
        raise MixingError("component index must refer to a linear time scale")
    if r < 0 or m < 1 or N < 1:
        raise MixingError("need r >= 0, m >= 1 and N >= 1")
    if L is None:
        L = _default_L(chain)
    T0 = float(m - 1 + r)
    lo, hi = float(m - 1), float(m + L)
    if zbar is None:
        x0 = np.zeros(decomposed.d) if x0 is None else x0
        zbar = integrate_averaged(decomposed.bar_B, hi / N, x0)
    if zbar.t_max < hi / N:
        raise MixingError(f"averaged path must reach t = {hi / N:g}")
    alphas = family.alpha_floats
    if decomposed.is_zero(i):
        return MartingaleCheck(0.0, 0.0, 0.0, L, n_histories, np.zeros((n_histories, decomposed.d)))
    integrand = _Integrand(decomposed, chain, alphas, i, N, r, zbar)
    knots = zbar.times * N
    knots = knots[(knots > lo) & (knots < hi)]
    values = np.empty((n_histories, decomposed.d))
    scale = 0.0
    ss = np.random.SeedSequence(seed)
    for h, child in enumerate(ss.spawn(n_histories)):
        history = sample_path(chain, T0 + 1.0, int(child.generate_state(1)[0]))
        jumps = history.jump_times[history.jump_times <= T0]
        bp = _breakpoints(lo, hi, alphas[:i], jumps, [T0, T0 + 1.0], r, knots)
        a, b = bp[:-1], bp[1:]
        keep = b - a > 1e-14
        a, b = a[keep], b[keep]
        nodes = (0.5 * (a + b))[:, None] + 0.5 * (b - a)[:, None] * _GL_X[None, :]
        weights = (0.5 * (b - a))[:, None] * _GL_W[None, :]
        block = np.ceil(0.5 * (a + b)).astype(np.int64)  # I(l) integrates over (l-1, l]
        s_flat = nodes.ravel()
        w_flat = weights.ravel()
        l_flat = np.repeat(block, len(_GL_X))
        direct = integrand.expect(s_flat, history, T0) * w_flat[:, None]
        nested = integrand.expect(s_flat, history, T0, pivot=T0 + 1.0) * w_flat[:, None]
        I_direct = np.zeros((L + 2, decomposed.d))  # index l - m + 1 for l = m-1 .. m+L
        I_nested = np.zeros((L + 2, decomposed.d))
        np.add.at(I_direct, l_flat - m + 1, direct)
        np.add.at(I_nested, l_flat - m + 1, nested)
        EI_m = I_direct[1]
        ER_m = I_nested[2:L + 2].sum(axis=0)  # l = m+1 .. m+L
        R_prev = I_direct[1:L + 1].sum(axis=0)  # l = m .. m-1+L
        values[h] = EI_m + ER_m - R_prev
        scale = max(scale, float(np.abs(I_direct).sum() + np.abs(I_nested).sum()))
    residual = float(np.max(np.abs(values)))
    # omitted terms l >= m+L: the last block is centered in xi(alpha_i s)
    K = decomposed.spec.K
    bound_B = 2.0 * K
    if i >= 2:
        decay = (alphas[i - 1] - alphas[i - 2]) * (m + L - 1)
    else:
        decay = alphas[0] * (m + L - 1) - T0
    decay = max(decay - (1.0 if r == 0 else 0.0), 0.0)
    tv = float(_tv_rows(chain, [decay]).max())
    gap = spectral_gap(chain)
    step = (alphas[i - 1] - (alphas[i - 2] if i >= 2 else 0.0)) * gap
    tail = bound_B * tv / (-np.expm1(-step)) if np.isfinite(step) and step > 0 else bound_B * tv
    allowance = 64 * np.finfo(float).eps * max(scale, 1.0)
    return MartingaleCheck(residual, tail, allowance, L, n_histories, values)
