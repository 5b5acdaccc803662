"""Limiting covariance of the fluctuation process for chain-driven fields.

The central object is the pair-weight matrix: for components ``B_i`` and
``B_j`` evaluated on chain states, ``a = f^T M(lags) g`` where ``f`` and ``g``
tabulate ``B_i`` and ``B_j`` over state tuples and ``M`` couples each
resonant coordinate pair through the two-time law.  Integrating ``M`` over
the resonance line once gives ``D(x, y)`` for every ``(x, y)`` by a single
bilinear form.
"""
from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .dynamics import AveragedPath
from .fast_process import FiniteChainSpec, ProcessError, spectral_gap, stationary_vector, transition_kernels
from .field import DecomposedField
from .time_scales import ResonantPair, TimeScaleFamily, resonant_pairs

__all__ = [
    "CovarianceError",
    "kernel_stack",
    "a_coeff",
    "D_coeff",
    "CovarianceModel",
    "CovarianceReport",
    "A_matrix",
    "A_matrix_literal",
    "vanishing_pairs_prediction",
    "discrete_extra_variance",
    "covariance_report",
    "sample_G0",
    "decay_envelope",
]

DEFAULT_BUDGET = 1_000_000
_GL16_X, _GL16_W = np.polynomial.legendre.leggauss(16)


class CovarianceError(ValueError):
    """Request outside the supported setting or over the quadrature budget."""


def _require_chain(process):
    if not isinstance(process, FiniteChainSpec):
        raise CovarianceError("limiting covariances are computed for finite-state chains only")


def kernel_stack(process: FiniteChainSpec, lags) -> np.ndarray:
    """Joint-law matrices ``J_s[a, b] = pi(a) K_s(a, b)`` for each lag, shape ``(len(lags), n, n)``.

    Negative lags give the transpose (coordinates swapped).
    """
    _require_chain(process)
    lags = np.atleast_1d(np.asarray(lags, dtype=float))
    pi = stationary_vector(process)
    try:
        K = transition_kernels(process, np.abs(lags))
    except ProcessError as exc:
        raise CovarianceError(str(exc)) from exc
    J = pi[None, :, None] * K
    neg = lags < 0
    J[neg] = np.transpose(J[neg], (0, 2, 1))
    return J


def _state_table(decomposed: DecomposedField, process: FiniteChainSpec, i: int, x, budget: int) -> np.ndarray:
    """``B_i(x, obs[a_1], ..., obs[a_i])`` over all state tuples, shape ``(n,)*i + (d,)``."""
    n = process.n_states
    if float(n) ** i > budget:
        raise CovarianceError(f"state table needs {n}^{i} entries, above the budget {budget}")
    idx = np.array(list(itertools.product(range(n), repeat=i)), dtype=np.int64)
    xi = process.observable[idx]
    x = np.atleast_1d(np.asarray(x, dtype=float))
    vals = decomposed.component(i, np.broadcast_to(x, (len(idx), decomposed.d)), xi)
    return vals.reshape((n,) * i + (decomposed.d,))


def _pair_weights(process: FiniteChainSpec, i: int, j: int, pairs: Sequence[ResonantPair], lag_stacks: Sequence[np.ndarray], budget: int) -> np.ndarray:
    """Weight tensor over ``(a_1..a_i, b_1..b_j)`` for a batch of lag vectors.

    ``lag_stacks[beta]`` is the ``(W, n, n)`` joint-law stack for pair beta.
    Returns shape ``(W, n^i, n^j)``.
    """
    n = process.n_states
    if float(n) ** (i + j) > budget:
        raise CovarianceError(f"pair weights need {n}^{i + j} entries, above the budget {budget}")
    pi = stationary_vector(process)
    letters = iter(string.ascii_letters)
    a_idx = [next(letters) for _ in range(i)]
    b_idx = [next(letters) for _ in range(j)]
    w_idx = next(letters)
    operands, subs = [], []
    paired_a = {p.i_prime for p in pairs}
    paired_b = {p.j_prime for p in pairs}
    for p, stack in zip(pairs, lag_stacks):
        operands.append(stack)
        subs.append(w_idx + a_idx[p.i_prime - 1] + b_idx[p.j_prime - 1])
    for ia in range(1, i + 1):
        if ia not in paired_a:
            operands.append(pi)
            subs.append(a_idx[ia - 1])
    for jb in range(1, j + 1):
        if jb not in paired_b:
            operands.append(pi)
            subs.append(b_idx[jb - 1])
    W = lag_stacks[0].shape[0] if lag_stacks else 1
    expr = ",".join(subs) + "->" + w_idx + "".join(a_idx) + "".join(b_idx)
    if not lag_stacks:
        operands.append(np.ones(1))
        expr = ",".join(subs + [w_idx]) + "->" + w_idx + "".join(a_idx) + "".join(b_idx)
    out = np.einsum(expr, *operands, optimize=True)
    return out.reshape(W, n**i, n**j)


def _valid_pairs(family: TimeScaleFamily, i: int, j: int, pairs) -> list:
    if pairs is None:
        return resonant_pairs(family, i, j)
    return list(pairs)


def a_coeff(decomposed: DecomposedField, process: FiniteChainSpec, pairs: Sequence[ResonantPair], i: int, j: int, l: int, m: int, x, y, s_values: Sequence[float], budget: int = DEFAULT_BUDGET) -> float:
    """``E[B_i^(l)(x, xi_1..xi_i) B_j^(m)(y, xi~_1..xi~_j)]`` with resonant pairs coupled.

    Pair beta draws ``(xi_{i'}, xi~_{j'})`` from the two-time law at lag
    ``s_values[beta]`` (positive: ``xi~`` is later); all other coordinates are
    independent with law ``mu``.  Component indices ``l, m`` are 0-based.
    """
    _require_chain(process)
    if len(s_values) != len(pairs):
        raise CovarianceError("one lag per resonant pair is required")
    stacks = [kernel_stack(process, [s]) for s in s_values]
    M = _pair_weights(process, i, j, pairs, stacks, budget)[0]
    f = _state_table(decomposed, process, i, x, budget)[..., l].ravel()
    g = _state_table(decomposed, process, j, y, budget)[..., m].ravel()
    return float(f @ M @ g)


# ---------------------------------------------------------------------------
# integrated weights and D


@dataclass(eq=False)
class IntegratedWeights:
    """``int M(rho w) dw`` (or the lattice sum) for one ``(i, j)``, with its truncation data."""

    i: int
    j: int
    pairs: list
    matrix: np.ndarray
    W: float
    tail_bound: float
    quadrature_error: float


def _truncation(process: FiniteChainSpec, W_override: float | None) -> tuple[float, float]:
    if W_override is not None:
        return float(W_override), np.nan
    gap = spectral_gap(process)
    if process.n_states == 1 or np.isinf(gap):
        return 1.0, 0.0
    if not gap > 1e-12:
        raise CovarianceError("chain has no spectral gap; supply an explicit truncation W")
    pi = stationary_vector(process)
    W = float(np.ceil(40.0 / gap))
    while True:
        K = kernel_stack(process, [W])[0] / pi[:, None]
        dev = float(np.abs(K - pi[None, :]).sum(axis=1).max())
        if dev < 1e-14 or W > 1e6:
            break
        W = float(np.ceil(W * 1.5))
    return W, dev / gap


def _integrate_weights(decomposed, process, family, i, j, budget, W_override=None) -> IntegratedWeights:
    pairs = resonant_pairs(family, i, j)
    W, tail = _truncation(process, W_override)
    rhos = [float(p.rho) for p in pairs]
    if process.is_discrete:
        ai, aj = family.alphas[i - 1], family.alphas[j - 1]
        if not (isinstance(ai, Fraction) and ai.denominator == 1 and isinstance(aj, Fraction) and aj.denominator == 1):
            raise CovarianceError("discrete time needs integer linear rates")
        g = gcd(int(ai), int(aj))
        m_max = int(np.ceil(W / g))
        w = g * np.arange(-m_max, m_max + 1, dtype=float)
        stacks = [kernel_stack(process, np.rint(r * w)) for r in rhos]
        mat = _pair_weights(process, i, j, pairs, stacks, budget).sum(axis=0) * g
        mat /= float(ai) * float(aj)
        return IntegratedWeights(i, j, pairs, mat, W, tail, 0.0)

    def panel_integral(n_panels):
        edges = np.linspace(0.0, W, n_panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[1:] + edges[:-1])
        nodes = (mid[:, None] + half[:, None] * _GL16_X[None, :]).ravel()
        weights = (half[:, None] * _GL16_W[None, :]).ravel()
        total = 0.0
        for sign in (1.0, -1.0):
            for lo in range(0, len(nodes), 256):
                w = sign * nodes[lo : lo + 256]
                stacks = [kernel_stack(process, r * w) for r in rhos]
                Mw = _pair_weights(process, i, j, pairs, stacks, budget)
                total = total + np.tensordot(weights[lo : lo + 256], Mw, axes=(0, 0))
        return total

    n_panels = 16
    prev = panel_integral(n_panels)
    err = np.inf
    while n_panels < 1024:
        n_panels *= 2
        cur = panel_integral(n_panels)
        err = float(np.max(np.abs(cur - prev)))
        prev = cur
        if err < 1e-13:
            break
    mat = prev / (float(family.alphas[i - 1]) * float(family.alphas[j - 1]))
    return IntegratedWeights(i, j, pairs, mat, W, tail, err)


def D_coeff(decomposed: DecomposedField, process: FiniteChainSpec, family: TimeScaleFamily, i: int, j: int, l: int, m: int, x, y, budget: int = DEFAULT_BUDGET, W: float | None = None) -> tuple[float, float]:
    """``D_ij^{l,m}(x, y)`` and an estimate of its truncation error.

    Continuous time: ``(alpha_i alpha_j)^{-1} int a(rho_1 w, ..., w) dw``
    over ``|w| <= W`` by composite 16-point Gauss-Legendre, panels doubled
    until stable.  Discrete time: the lattice sum
    ``g / (alpha_i alpha_j) sum_{w in gZ} a(rho w)`` with ``g = gcd``.
    ``W`` defaults to the lag where the chain kernel is within ``1e-14`` of
    stationarity (from the spectral gap).
    """
    _require_chain(process)
    k = family.k
    if not (1 <= i <= k and 1 <= j <= k):
        raise CovarianceError("D is defined for linear-scale indices only")
    iw = _integrate_weights(decomposed, process, family, i, j, budget, W)
    f = _state_table(decomposed, process, i, x, budget)[..., l].ravel()
    g = _state_table(decomposed, process, j, y, budget)[..., m].ravel()
    val = float(f @ iw.matrix @ g)
    trunc = float(np.abs(f).max() * np.abs(g).max() * (iw.tail_bound if np.isfinite(iw.tail_bound) else np.nan))
    return val, trunc


# ---------------------------------------------------------------------------
# the model: cumulative covariance tables along Zbar


def _gl_panels(a: float, b: float, n_panels: int):
    edges = np.linspace(a, b, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = mid[:, None] + half[:, None] * _GL16_X[None, :]
    weights = half[:, None] * _GL16_W[None, :]
    return edges, nodes, weights


@dataclass(eq=False)
class CovarianceModel:
    """Predicted covariance of ``G^0`` for one scenario.

    For every ``(i, j)`` with ``i, j <= k`` this tabulates
    ``F_ij(R) = int_0^R D_ij(Zbar(r/alpha_i), Zbar(r/alpha_j)) dr`` on a grid
    and interpolates it with cubic Hermite splines (slopes are ``D`` itself),
    so ``Cov(G^0(s), G^0(t)) = sum_ij F_ij(min(alpha_i s, alpha_j t))`` plus,
    in discrete time, the extra variance of the superlinear components.
    """

    decomposed: DecomposedField
    process: FiniteChainSpec
    family: TimeScaleFamily
    zbar: AveragedPath
    T_final: float
    budget: int = DEFAULT_BUDGET
    W: float | None = None
    n_nodes: int = 129
    weights: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    extra_tables: dict = field(default_factory=dict)

    def __post_init__(self):
        _require_chain(self.process)
        fam = self.family
        al = fam.alpha_floats
        need = self.T_final * al.max() / al.min()
        if self.zbar.t_max < need - 1e-12:
            raise CovarianceError(f"averaged path must extend to {need:g} (alpha_k/alpha_1 * T)")
        self.discrete = self.process.is_discrete
        for i in range(1, fam.k + 1):
            for j in range(1, fam.k + 1):
                if self.decomposed.is_zero(i) or self.decomposed.is_zero(j):
                    continue
                self.weights[(i, j)] = _integrate_weights(self.decomposed, self.process, fam, i, j, self.budget, self.W)
                self.tables[(i, j)] = self._cumulative(i, j)
        if self.discrete:
            for i in range(fam.k + 1, fam.ell + 1):
                if not self.decomposed.is_zero(i):
                    self.extra_tables[i] = self._extra_cumulative(i)

    # D along Zbar -------------------------------------------------------
    def D(self, i: int, j: int, x, y) -> np.ndarray:
        """``D_ij(x, y)`` as a ``(d, d)`` matrix (zero when a component vanishes)."""
        d = self.decomposed.d
        if (i, j) not in self.weights:
            return np.zeros((d, d))
        f = _state_table(self.decomposed, self.process, i, x, self.budget).reshape(-1, d)
        g = _state_table(self.decomposed, self.process, j, y, self.budget).reshape(-1, d)
        return f.T @ self.weights[(i, j)].matrix @ g

    def _D_batch(self, i, j, xs, ys):
        d = self.decomposed.d
        n = self.process.n_states
        idx_i = np.array(list(itertools.product(range(n), repeat=i)), dtype=np.int64)
        idx_j = np.array(list(itertools.product(range(n), repeat=j)), dtype=np.int64)
        obs = self.process.observable
        fx = self.decomposed.component(i, xs[:, None, :], obs[idx_i][None])  # (R, n^i, d)
        gy = self.decomposed.component(j, ys[:, None, :], obs[idx_j][None])
        return np.einsum("ral,ab,rbm->rlm", fx, self.weights[(i, j)].matrix, gy)

    def _cumulative(self, i, j):
        al = self.family.alpha_floats
        R_max = self.T_final * max(al[i - 1], al[j - 1])
        edges, nodes, w = _gl_panels(0.0, R_max, self.n_nodes - 1)
        flat = nodes.ravel()
        vals = self._D_batch(i, j, self.zbar(flat / al[i - 1]), self.zbar(flat / al[j - 1]))
        per_panel = np.einsum("pq,pqlm->plm", w, vals.reshape(nodes.shape + vals.shape[1:]))
        F = np.concatenate([np.zeros((1,) + per_panel.shape[1:]), np.cumsum(per_panel, axis=0)])
        slopes = self._D_batch(i, j, self.zbar(edges / al[i - 1]), self.zbar(edges / al[j - 1]))
        return CubicHermiteSpline(edges, F, slopes, axis=0)

    def _second_moment_batch(self, i, xs):
        mu = self.decomposed.mu
        n = len(mu.weights)
        if float(n) ** i > self.budget:
            raise CovarianceError(f"second moment needs {n}^{i} terms, above the budget {self.budget}")
        idx = np.array(list(itertools.product(range(n), repeat=i)), dtype=np.int64)
        w = np.prod(mu.weights[idx], axis=1)
        vals = self.decomposed.component(i, xs[:, None, :], mu.atoms[idx][None])
        return np.einsum("a,ral,ram->rlm", w, vals, vals)

    def _extra_cumulative(self, i):
        edges, nodes, w = _gl_panels(0.0, self.T_final, self.n_nodes - 1)
        vals = self._second_moment_batch(i, self.zbar(nodes.ravel()))
        per_panel = np.einsum("pq,pqlm->plm", w, vals.reshape(nodes.shape + vals.shape[1:]))
        F = np.concatenate([np.zeros((1,) + per_panel.shape[1:]), np.cumsum(per_panel, axis=0)])
        slopes = self._second_moment_batch(i, self.zbar(edges))
        return CubicHermiteSpline(edges, F, slopes, axis=0)

    # covariances ---------------------------------------------------------
    def cov_components(self, i: int, j: int, Ti, Tj) -> np.ndarray:
        """``Cov(G_i^0(Ti), G_j^0(Tj))`` in the component's own time convention."""
        d = self.decomposed.d
        Ti = np.asarray(Ti, dtype=float)
        Tj = np.asarray(Tj, dtype=float)
        shape = np.broadcast_shapes(Ti.shape, Tj.shape)
        k = self.family.k
        if i <= k and j <= k:
            if (i, j) not in self.tables:
                return np.zeros(shape + (d, d))
            return self.tables[(i, j)](np.minimum(Ti, Tj))
        if self.discrete and i == j and i in self.extra_tables:
            return self.extra_tables[i](np.minimum(Ti, Tj))
        return np.zeros(shape + (d, d))

    def cov_G(self, s, t) -> np.ndarray:
        """``Cov(G^0(s), G^0(t))`` as ``(..., d, d)``; ``G^0(t) = sum_{i<=k} G_i^0(alpha_i t) + sum_{i>k} G_i^0(t)``."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        al = self.family.alpha_floats
        d = self.decomposed.d
        out = np.zeros(np.broadcast_shapes(s.shape, t.shape) + (d, d))
        for (i, j), spl in self.tables.items():
            out = out + spl(np.minimum(al[i - 1] * s, al[j - 1] * t))
        for i, spl in self.extra_tables.items():
            out = out + spl(np.minimum(s, t))
        return out

    def var_G(self, t) -> np.ndarray:
        return self.cov_G(t, t)

    def A(self, u) -> np.ndarray:
        """Variance rate ``d/dt Var G^0(t)`` at ``t = u``."""
        u = np.asarray(u, dtype=float)
        al = self.family.alpha_floats
        d = self.decomposed.d
        out = np.zeros(u.shape + (d, d))
        for (i, j), spl in self.tables.items():
            c = min(al[i - 1], al[j - 1])
            out = out + c * spl(c * u, 1)
        for i, spl in self.extra_tables.items():
            out = out + spl(u, 1)
        return out

    def A_literal(self, u) -> np.ndarray:
        """``sum_ij D_ij(Zbar(alpha_i u), Zbar(alpha_j u))`` without the scale factors."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        al = self.family.alpha_floats
        d = self.decomposed.d
        out = np.zeros(u.shape + (d, d))
        for (i, j) in self.tables:
            out = out + self._D_batch(i, j, self.zbar(al[i - 1] * u), self.zbar(al[j - 1] * u))
        for i in self.extra_tables:
            out = out + self._second_moment_batch(i, self.zbar(u))
        return out

    def D_at(self, i, j, x, y) -> np.ndarray:
        return self.D(i, j, x, y)

    def Q_covariance(self, times, grad_bar_B, n_fine: int = 1024) -> tuple[np.ndarray, float]:
        """Covariance of ``Q^0`` at ``times`` and a refinement error estimate.

        ``Q^0 = G^0 + int grad_bar_B(Zbar) Q^0`` is linear in ``G^0``; the
        trapezoidal discretization ``L Q = G`` on a uniform grid gives
        ``Cov Q = L^{-1} Cov G L^{-T}``.  The grid is doubled once to estimate
        the discretization error.
        """
        times = np.asarray(times, dtype=float)

        def on_grid(n):
            grid = np.linspace(0.0, self.T_final, n + 1)
            d = self.decomposed.d
            mats = np.asarray(grad_bar_B(self.zbar(grid)), dtype=float).reshape(n + 1, d, d)
            h = self.T_final / n
            wts = np.tril(np.full((n + 1, n + 1), h), -1)
            wts[:, 0] *= 0.5
            wts[np.arange(1, n + 1), np.arange(1, n + 1)] = 0.5 * h
            wts[0, 0] = 0.0
            blocks = np.eye(d)[None, None] * np.eye(n + 1)[:, :, None, None] - wts[:, :, None, None] * mats[None]
            L = blocks.transpose(0, 2, 1, 3).reshape((n + 1) * d, (n + 1) * d)
            S, T = np.meshgrid(grid, grid, indexing="ij")
            C = self.cov_G(S, T)  # (n+1, n+1, d, d)
            C = C.transpose(0, 2, 1, 3).reshape((n + 1) * d, (n + 1) * d)
            Linv = np.linalg.solve(L, np.eye(L.shape[0]))
            CQ = Linv @ C @ Linv.T
            CQ = CQ.reshape(n + 1, d, n + 1, d).transpose(0, 2, 1, 3)
            # linear interpolation in each time argument
            P = np.zeros((len(times), n + 1))
            pos = np.clip(times / h, 0, n)
            lo = np.minimum(np.floor(pos).astype(np.int64), n - 1)
            frac = pos - lo
            P[np.arange(len(times)), lo] = 1 - frac
            P[np.arange(len(times)), lo + 1] += frac
            return np.einsum("ia,ablm,jb->ijlm", P, CQ, P)

        coarse = on_grid(n_fine // 2)
        fine = on_grid(n_fine)
        return fine, float(np.max(np.abs(fine - coarse)))


# ---------------------------------------------------------------------------
# module-level operations


def A_matrix(model: CovarianceModel, u) -> np.ndarray:
    """Variance-rate matrix: ``sum_ij min(alpha_i, alpha_j) D_ij(Zbar(c u/alpha_i), Zbar(c u/alpha_j))``.

    With this form ``Var G^0(t) = int_0^t A(u) du`` holds exactly for the
    composition ``G^0(t) = sum_i G_i^0(alpha_i t)``.
    """
    return model.A(u)


def A_matrix_literal(model: CovarianceModel, u) -> np.ndarray:
    """``sum_ij D_ij(Zbar(alpha_i u), Zbar(alpha_j u))``, reported for comparison with ``A_matrix``."""
    return model.A_literal(u)


def vanishing_pairs_prediction(family: TimeScaleFamily, i: int, j: int, time_kind: str = "continuous") -> float:
    """Predicted limit of ``E G_i(s) G_j(t)`` when ``i`` indexes a superlinear scale: zero."""
    if time_kind != "continuous":
        raise CovarianceError("superlinear components do not vanish in discrete time")
    if not family.k < i <= family.ell:
        raise CovarianceError(f"index {i} is not a superlinear scale (k = {family.k})")
    if not 1 <= j <= family.ell:
        raise IndexError(f"index {j} outside 1..{family.ell}")
    return 0.0


def discrete_extra_variance(decomposed: DecomposedField, mu, zbar: AveragedPath, i: int, s: float, t: float, family: TimeScaleFamily | None = None, tol: float = 1e-8, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """``int_0^{min(s,t)} du int B_i B_i^T(Zbar(u), .) dmu^{(x) i}`` as a ``(d, d)`` matrix.

    Inner integral: exact product sum over the atoms of ``mu``.  Outer
    integral: trapezoid rule, refined by halving until the change is below
    ``tol``.
    """
    if family is not None and i <= family.k:
        raise CovarianceError("the extra variance concerns superlinear indices only")
    n = len(mu.weights)
    if float(n) ** i > budget:
        raise CovarianceError(f"product sum needs {n}^{i} terms, above the budget {budget}")
    idx = np.array(list(itertools.product(range(n), repeat=i)), dtype=np.int64)
    w = np.prod(np.asarray(mu.weights)[idx], axis=1)
    atoms = np.asarray(mu.atoms)[idx]
    top = min(s, t)
    if top <= 0:
        return np.zeros((decomposed.d, decomposed.d))

    def integrand(u):
        vals = decomposed.component(i, zbar(u)[:, None, :], atoms[None])
        return np.einsum("a,ral,ram->rlm", w, vals, vals)

    m = 16
    u = np.linspace(0.0, top, m + 1)
    prev = np.trapezoid(integrand(u), u, axis=0)
    while m < 1 << 20:
        m *= 2
        u = np.linspace(0.0, top, m + 1)
        cur = np.trapezoid(integrand(u), u, axis=0)
        if np.max(np.abs(cur - prev)) < tol:
            return cur
        prev = cur
    return prev


def decay_envelope(model: CovarianceModel, i: int, j: int, l: int = 0, m: int = 0, x=None, y=None, n_points: int = 200) -> dict:
    """Fit ``|a(rho w)| <= C exp(-c |w|)`` along the resonance line at ``(x, y)``."""
    if (i, j) not in model.weights:
        return {"C": 0.0, "c": np.inf, "max_ratio": 0.0}
    x = model.zbar.x0 if x is None else x
    y = model.zbar.x0 if y is None else y
    iw = model.weights[(i, j)]
    w = np.linspace(-iw.W, iw.W, n_points)
    stacks = [kernel_stack(model.process, float(p.rho) * w) for p in iw.pairs]
    M = _pair_weights(model.process, i, j, iw.pairs, stacks, model.budget)
    f = _state_table(model.decomposed, model.process, i, x, model.budget)[..., l].ravel()
    g = _state_table(model.decomposed, model.process, j, y, model.budget)[..., m].ravel()
    a = np.abs(np.einsum("a,wab,b->w", f, M, g))
    ok = a > 1e-13 * max(a.max(), 1e-300)
    if ok.sum() < 3:
        return {"C": float(a.max()), "c": np.inf, "max_ratio": 1.0}
    slope, _ = np.polyfit(np.abs(w[ok]), np.log(a[ok]), 1)
    c = float(max(-slope, 0.0))
    C = float(np.max(a[ok] * np.exp(c * np.abs(w[ok]))))
    # points below the fit floor are bounded by the floor itself
    ratio = a / np.maximum(C * np.exp(-c * np.abs(w)), 1e-13 * a.max())
    return {"C": C, "c": c, "max_ratio": float(np.max(ratio))}


@dataclass(eq=False)
class CovarianceReport:
    """Predicted second-order structure of ``G^0`` (and ``Q^0``) on an output grid."""

    times: np.ndarray
    d: int
    D_table: dict
    A_rate: np.ndarray
    A_literal: np.ndarray
    cov_G: np.ndarray
    var_G: np.ndarray
    cov_direct: np.ndarray
    extra_variances: dict
    psd_min_eigenvalue: float
    increment_structure_gap: float
    monotone_variance: bool
    truncation: dict
    envelopes: dict
    cov_Q: np.ndarray | None = None
    Q_error: float | None = None
    model: CovarianceModel | None = field(default=None, repr=False)

    @property
    def psd(self) -> bool:
        return self.psd_min_eigenvalue >= -1e-9

    def flat_covariance(self) -> np.ndarray:
        n = len(self.times)
        return self.cov_G.transpose(0, 2, 1, 3).reshape(n * self.d, n * self.d)

    def as_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "D_at_start": {f"{i},{j}": v.tolist() for (i, j), v in self.D_table.items()},
            "A_rate": self.A_rate.tolist(),
            "A_literal": self.A_literal.tolist(),
            "var_G": self.var_G.tolist(),
            "extra_variances": {str(k): v.tolist() for k, v in self.extra_variances.items()},
            "psd_min_eigenvalue": self.psd_min_eigenvalue,
            "increment_structure_gap": self.increment_structure_gap,
            "monotone_variance": self.monotone_variance,
            "truncation": self.truncation,
            "envelopes": self.envelopes,
            "var_Q": None if self.cov_Q is None else np.einsum("iilm->ilm", self.cov_Q).tolist(),
            "Q_error": self.Q_error,
        }


def covariance_report(model: CovarianceModel, times, grad_bar_B=None, q_grid: int = 1024) -> CovarianceReport:
    """Assemble the predicted covariance structure on ``times``."""
    times = np.asarray(times, dtype=float)
    d = model.decomposed.d
    S, T = np.meshgrid(times, times, indexing="ij")
    cov = model.cov_G(S, T)
    var = np.einsum("iilm->ilm", cov)
    # the sum of component cross-covariances, term by term
    al = model.family.alpha_floats
    direct = np.zeros_like(cov)
    for (i, j) in model.tables:
        direct += model.cov_components(i, j, al[i - 1] * S, al[j - 1] * T)
    for i in model.extra_tables:
        direct += model.cov_components(i, i, S, T)
    A_rate = model.A(times)
    A_lit = model.A_literal(times)
    sym = 0.5 * (A_rate + np.swapaxes(A_rate, -1, -2))
    min_eig = float(np.min(np.linalg.eigvalsh(sym))) if len(times) else 0.0
    flat = cov.transpose(0, 2, 1, 3).reshape(len(times) * d, len(times) * d)
    min_eig = min(min_eig, float(np.min(np.linalg.eigvalsh(0.5 * (flat + flat.T)))) / max(1.0, len(times)))
    mins = np.minimum(S, T)
    inc_gap = float(np.max(np.abs(cov - model.cov_G(mins, mins)))) if len(times) else 0.0
    diag_var = np.einsum("ill->il", var)
    monotone = bool(np.all(np.diff(diag_var, axis=0) >= -1e-12))
    x0 = model.zbar.x0
    D_table = {key: model.D(key[0], key[1], x0, x0) for key in model.weights}
    trunc = {f"{i},{j}": {"W": iw.W, "tail_bound": iw.tail_bound, "quadrature_error": iw.quadrature_error} for (i, j), iw in model.weights.items()}
    env = {}
    if not model.discrete:
        for key in model.weights:
            env[f"{key[0]},{key[1]}"] = decay_envelope(model, *key)
    extras = {i: spl(times) for i, spl in model.extra_tables.items()}
    cov_Q = Q_err = None
    if grad_bar_B is not None:
        cov_Q, Q_err = model.Q_covariance(times, grad_bar_B, q_grid)
    return CovarianceReport(times, d, D_table, A_rate, A_lit, cov, var, direct, extras, min_eig, inc_gap, monotone, trunc, env, cov_Q, Q_err, model)


def sample_G0(report: CovarianceReport, seed: int, n_samples: int = 1, jitter: float = 1e-12) -> np.ndarray:
    """Gaussian draws with the predicted covariance on the report's grid, shape ``(n, n_t, d)``.

    The joint covariance over all output times is factorized directly, which
    covers dependent increments as well as independent ones.
    """
    C = report.flat_covariance()
    C = 0.5 * (C + C.T)
    n = C.shape[0]
    ev = np.linalg.eigvalsh(C) if n else np.zeros(0)
    scale = max(1.0, float(np.abs(ev).max())) if n else 1.0
    if n and ev.min() < -1e-9 * scale:
        raise CovarianceError(f"predicted covariance is not positive semidefinite (min eigenvalue {ev.min():.3g})")
    rng = np.random.default_rng(seed)
    if n == 0 or np.all(np.abs(C) == 0):
        return np.zeros((n_samples, len(report.times), report.d))
    L = np.linalg.cholesky(C + jitter * scale * np.eye(n))
    z = rng.standard_normal((n_samples, n))
    return (z @ L.T).reshape(n_samples, len(report.times), report.d)
