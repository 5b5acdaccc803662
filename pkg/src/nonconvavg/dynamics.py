"""Slow motion, averaged motion, the auxiliary process Y and fluctuation processes.

Times follow two clocks: *fast* time ``u`` (the argument of ``xi``) and
*slow* time ``t = eps * u``.  ``Z(t) = X(t / eps)`` lives on the slow clock.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .field import DecomposedField, FieldSpec
from .time_scales import TimeScaleFamily, fast_arguments, switch_times, tau

__all__ = [
    "DynamicsError",
    "ScenarioGrid",
    "AveragedPath",
    "SlowResult",
    "TrajectoryBundle",
    "integrate_averaged",
    "integrate_slow",
    "integrate_slow_batch",
    "integrate_Y",
    "simulate_bundle",
    "fluctuations",
    "riemann_sum_G",
    "solve_limit_ode",
    "VolterraResult",
]

_GL2 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_CHUNK = 1 << 16


class DynamicsError(RuntimeError):
    """Integration failure: horizon exceeded or a non-finite state."""


@dataclass(frozen=True, eq=False)
class ScenarioGrid:
    """Slow horizon ``T_final``, output times, and the fast-time step ``h``.

    ``h`` caps the length of every integration piece in fast time; pieces are
    additionally cut at every switch time of the driving signal.  At least 100
    pieces cover the horizon, i.e. ``h <= T_final / (100 eps)``.
    """

    epsilon: float
    T_final: float
    output_times: np.ndarray
    h: float | None = None
    slow_step: float = 1e-2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.T_final > 0:
            raise ValueError("T_final must be positive")
        out = np.asarray(self.output_times, dtype=float).ravel()
        if out.size == 0 or np.any(np.diff(out) <= 0) or out[0] < 0 or out[-1] > self.T_final * (1 + 1e-12):
            raise ValueError("output_times must be increasing within [0, T_final]")
        object.__setattr__(self, "output_times", out)
        cap = self.T_final / (100 * self.epsilon)
        if self.h is None:
            object.__setattr__(self, "h", min(1.0, cap))
        elif not 0 < self.h <= cap * (1 + 1e-12):
            raise ValueError(f"h must lie in (0, T_final/(100 eps)] = (0, {cap:g}]")

    @property
    def fast_horizon(self) -> float:
        return self.T_final / self.epsilon

    def with_epsilon(self, epsilon: float) -> "ScenarioGrid":
        return ScenarioGrid(epsilon, self.T_final, self.output_times, None, self.slow_step)


# ---------------------------------------------------------------------------
# averaged motion


@dataclass(eq=False)
class AveragedPath:
    """Solution of the averaged equation on the slow clock, cubic-Hermite interpolated."""

    times: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    error_estimate: float
    spline: CubicHermiteSpline = field(repr=False)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.times[-1] * (1 + 1e-12) + 1e-12):
            raise DynamicsError("averaged path evaluated outside its range")
        return self.spline(t)

    @property
    def x0(self) -> np.ndarray:
        return self.values[0]

    @property
    def t_max(self) -> float:
        return float(self.times[-1])


def _rk4_uniform(f, x0: np.ndarray, t_max: float, n: int) -> np.ndarray:
    h = t_max / n
    out = np.empty((n + 1,) + x0.shape)
    x = x0.copy()
    out[0] = x
    for m in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DynamicsError(f"averaged motion became non-finite at t = {(m + 1) * h:g}")
        out[m + 1] = x
    return out


def integrate_averaged(bar_B: Callable[[np.ndarray], np.ndarray], grid: ScenarioGrid | float, x0, t_max: float | None = None, tol: float = 1e-10, max_step: float = 1e-2) -> AveragedPath:
    """RK4 for ``dZ/dt = bar_B(Z)`` with step halving until successive solutions agree to ``tol``.

    The slow clock is used directly, so the result does not depend on eps.
    ``t_max`` defaults to the grid horizon and may be larger (the covariance
    formulas need the path up to ``alpha_k * T``).
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    horizon = grid.T_final if isinstance(grid, ScenarioGrid) else float(grid)
    t_max = horizon if t_max is None else max(float(t_max), horizon)
    n = max(16, int(np.ceil(t_max / max_step)))
    coarse = _rk4_uniform(bar_B, x0, t_max, n)
    err = np.inf
    while n < 1 << 22:
        fine = _rk4_uniform(bar_B, x0, t_max, 2 * n)
        err = float(np.max(np.abs(fine[::2] - coarse)))
        n *= 2
        coarse = fine
        if err < tol:
            break
    times = np.linspace(0.0, t_max, n + 1)
    slopes = np.asarray(bar_B(coarse), dtype=float)
    spline = CubicHermiteSpline(times, coarse, slopes, axis=0)
    return AveragedPath(times, coarse, slopes, err, spline)


# ---------------------------------------------------------------------------
# slow motion


@dataclass(eq=False)
class SlowResult:
    times: np.ndarray
    Z: np.ndarray
    sup_deviation: np.ndarray | None


def _fast_cuts(path, family: TimeScaleFamily, grid: ScenarioGrid, extra: Sequence[float] = ()) -> np.ndarray:
    U = grid.fast_horizon
    top = float(family.q(family.ell, U))
    if top > path.horizon * (1 + 1e-12):
        raise DynamicsError(f"q_l(T/eps) = {top:g} exceeds the path horizon {path.horizon:g}")
    parts = [
        np.array([0.0, U]),
        np.arange(0.0, U, grid.h),
        grid.output_times / grid.epsilon,
        np.asarray(extra, dtype=float),
    ]
    if path.spec.is_discrete:
        parts.append(np.arange(0.0, np.floor(U) + 1))
    else:
        parts.append(switch_times(path, family, 0.0, U))
    cuts = np.unique(np.concatenate(parts))
    return cuts[(cuts >= 0) & (cuts <= U)]


def _piece_arguments(path, family: TimeScaleFamily, mids: np.ndarray) -> np.ndarray:
    if path.spec.is_discrete:
        mids = np.floor(mids)
    return fast_arguments(path, family, mids)


def _check_horizon(path, family: TimeScaleFamily, grid: ScenarioGrid):
    top = float(family.q(family.ell, grid.fast_horizon))
    if top > path.horizon * (1 + 1e-12):
        raise DynamicsError(f"q_l(T/eps) = {top:g} exceeds the path horizon {path.horizon:g}")


def rk4_pieces(f, x0: np.ndarray, starts: np.ndarray, dts: np.ndarray, xis: np.ndarray, record: Callable | None = None) -> np.ndarray:
    """Batched RK4, one step per piece: ``dX/du = f(u, X, xi)`` with ``xi`` frozen on the piece.

    ``x0`` is ``(M, d)``, ``starts``/``dts`` are ``(M, P)`` and ``xis`` is
    ``(M, P, ...)``.  Padding pieces have ``dt = 0``.  ``record(k, X)`` is
    called after every piece.
    """
    x = np.array(x0, dtype=float)
    for k in range(dts.shape[1]):
        h = dts[:, k][:, None]
        u = starts[:, k]
        xi = xis[:, k]
        k1 = f(u, x, xi)
        k2 = f(u + 0.5 * h[:, 0], x + 0.5 * h * k1, xi)
        k3 = f(u + 0.5 * h[:, 0], x + 0.5 * h * k2, xi)
        k4 = f(u + h[:, 0], x + h * k3, xi)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise DynamicsError(f"slow motion became non-finite at fast time {u[bad] + h[bad, 0]:g} (path {bad})")
        if record is not None:
            record(k, x)
    return x


def integrate_slow_batch(spec: FieldSpec, paths: Sequence, family: TimeScaleFamily, grid: ScenarioGrid, x0, zbar: AveragedPath | None = None) -> list[SlowResult]:
    """Integrate ``Z`` for several realizations at once (vectorized over paths)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    eps = grid.epsilon
    M = len(paths)
    discrete = paths[0].spec.is_discrete
    if discrete:
        return _integrate_discrete_batch(spec, paths, family, grid, x0, zbar)
    cut_list = [_fast_cuts(p, family, grid) for p in paths]
    P = max(len(c) for c in cut_list) - 1
    starts = np.empty((M, P))
    dts = np.zeros((M, P))
    xis = np.empty((M, P, family.ell, spec.wp))
    ends = np.empty((M, P))
    out_idx = np.empty((M, len(grid.output_times)), dtype=np.int64)
    for m, (p, c) in enumerate(zip(paths, cut_list)):
        n = len(c) - 1
        starts[m, :n] = c[:-1]
        starts[m, n:] = c[-1]
        dts[m, :n] = np.diff(c)
        ends[m, :n] = c[1:]
        ends[m, n:] = c[-1]
        xi = _piece_arguments(p, family, 0.5 * (c[:-1] + c[1:]))
        xis[m, :n] = xi
        xis[m, n:] = xi[-1]
        out_idx[m] = np.searchsorted(c, grid.output_times / eps) - 1
    Z_out = np.empty((M, len(grid.output_times), spec.d))
    has_zero = grid.output_times[0] == 0.0
    sup = np.zeros(M) if zbar is not None else None
    zbar_ends = zbar(eps * ends) if zbar is not None else None

    def record(k, x):
        hit = out_idx == k
        if hit.any():
            mm, jj = np.nonzero(hit)
            Z_out[mm, jj] = x[mm]
        if sup is not None:
            np.maximum(sup, np.abs(x - zbar_ends[:, k]).max(axis=1), out=sup)

    def f(u, x, xi):
        return eps * spec(x, xi)

    rk4_pieces(f, np.broadcast_to(x0, (M, spec.d)), starts, dts, xis, record)
    if has_zero:
        Z_out[:, 0] = x0
    return [SlowResult(grid.output_times.copy(), Z_out[m], None if sup is None else np.array(sup[m])) for m in range(M)]


def _integrate_discrete_batch(spec, paths, family, grid, x0, zbar):
    eps = grid.epsilon
    M = len(paths)
    for p in paths:
        _check_horizon(p, family, grid)
    n_steps = int(np.floor(grid.fast_horizon + 1e-9))
    n = np.arange(n_steps)
    xis = np.stack([fast_arguments(p, family, n) for p in paths])
    want = np.floor(grid.output_times / eps + 1e-9).astype(np.int64)
    Z_out = np.empty((M, len(want), spec.d))
    x = np.broadcast_to(x0, (M, spec.d)).astype(float)
    zb = zbar(eps * np.arange(n_steps + 1)) if zbar is not None else None
    sup = np.zeros(M) if zbar is not None else None
    for step in range(n_steps + 1):
        hit = want == step
        if hit.any():
            Z_out[:, hit] = x[:, None, :]
        if sup is not None:
            np.maximum(sup, np.abs(x - zb[step]).max(axis=1), out=sup)
        if step == n_steps:
            break
        x = x + eps * spec(x, xis[:, step])
        if not np.all(np.isfinite(x)):
            raise DynamicsError(f"slow motion became non-finite at step {step + 1}")
    return [SlowResult(grid.output_times.copy(), Z_out[m], None if sup is None else np.array(sup[m])) for m in range(M)]


def integrate_slow(spec: FieldSpec, path, family: TimeScaleFamily, grid: ScenarioGrid, x0, zbar: AveragedPath | None = None) -> SlowResult:
    """``Z^eps`` at the output times for one realization.

    Continuous time: RK4 in fast time with one step per piece, where pieces
    are cut at every switch time of ``xi(q_i(.))`` and are at most ``h``
    long.  Discrete time: the exact recursion ``X(n+1) = X(n) + eps B``.
    When ``zbar`` is given, ``sup |Z - Zbar|`` over all piece ends is
    recorded as well.
    """
    return integrate_slow_batch(spec, [path], family, grid, x0, zbar)[0]


# ---------------------------------------------------------------------------
# the auxiliary process Y and the bundle


@dataclass(eq=False)
class TrajectoryBundle:
    """One realization on the output grid.

    ``Y_components[:, i-1]`` is ``Y_i^eps(t)`` with the ``t / alpha_i`` upper
    limit for linear scales; ``Y_scaled[:, i-1]`` is ``int_0^t B_i ds``, i.e.
    ``Y_i^eps(alpha_i t)`` for ``i <= k``.  ``Z`` is ``None`` when the slow
    motion was not integrated.
    """

    epsilon: float
    times: np.ndarray
    Zbar: np.ndarray
    Y: np.ndarray
    Y0: np.ndarray
    Y_components: np.ndarray
    Y_scaled: np.ndarray
    identity_residual: float
    Z: np.ndarray | None = None
    sup_deviation: float | None = None
    seed: int | None = None

    @property
    def scale(self) -> float:
        return self.epsilon ** -0.5

    @property
    def G(self) -> np.ndarray:
        return self.scale * (self.Y - self.Zbar)

    @property
    def G_components(self) -> np.ndarray:
        return self.scale * self.Y_components

    @property
    def G_scaled(self) -> np.ndarray:
        return self.scale * self.Y_scaled

    @property
    def Q(self) -> np.ndarray | None:
        return None if self.Z is None else self.scale * (self.Z - self.Zbar)


@dataclass(eq=False)
class YResult:
    times: np.ndarray
    Y: np.ndarray
    Y0: np.ndarray
    Y_components: np.ndarray
    Y_scaled: np.ndarray
    identity_residual: float


def integrate_Y(decomposed: DecomposedField, path, family: TimeScaleFamily, grid: ScenarioGrid, y0, zbar: AveragedPath) -> YResult:
    """Quadrature of ``B``, ``bar_B`` and every ``B_i`` along ``Zbar``.

    The integrand is smooth between switch times, so two-point Gauss-Legendre
    on each piece (pieces no longer than ``slow_step`` in slow time) is
    accurate far beyond Monte Carlo resolution.  ``Y`` is integrated from the
    full field independently of the components, and the residual of
    ``Y = Y0 + sum_i Y_i(alpha_i t)`` is returned.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    eps = grid.epsilon
    d = decomposed.d
    ell = decomposed.ell
    k = family.k
    _check_horizon(path, family, grid)
    scaled_targets = [grid.output_times / float(a) for a in family.alphas]
    extra = np.concatenate([np.arange(0.0, grid.T_final, grid.slow_step) / eps] + [t / eps for t in scaled_targets])
    cuts = _fast_cuts(path, family, grid, extra)
    n_pieces = len(cuts) - 1
    cum_full = np.zeros((n_pieces + 1, d))
    cum_bar = np.zeros((n_pieces + 1, d))
    cum_comp = np.zeros((n_pieces + 1, ell, d))
    acc_full = np.zeros(d)
    acc_bar = np.zeros(d)
    acc_comp = np.zeros((ell, d))
    for lo in range(0, n_pieces, _CHUNK):
        hi = min(lo + _CHUNK, n_pieces)
        a = cuts[lo:hi]
        b = cuts[lo + 1 : hi + 1]
        xi = _piece_arguments(path, family, 0.5 * (a + b))
        L = eps * (b - a)
        s_nodes = eps * (a[:, None] + (b - a)[:, None] * _GL2[None, :])
        zb = zbar(s_nodes)
        xi_n = np.broadcast_to(xi[:, None], (len(a), 2) + xi.shape[1:])
        full = decomposed.spec(zb, xi_n)
        bar = decomposed.bar_B(zb)
        comp = decomposed.components(zb, xi_n)
        w = 0.5 * L
        piece_full = w[:, None] * full.sum(axis=1)
        piece_bar = w[:, None] * bar.sum(axis=1)
        piece_comp = w[:, None, None] * comp.sum(axis=1)
        cum_full[lo + 1 : hi + 1] = acc_full + np.cumsum(piece_full, axis=0)
        cum_bar[lo + 1 : hi + 1] = acc_bar + np.cumsum(piece_bar, axis=0)
        cum_comp[lo + 1 : hi + 1] = acc_comp + np.cumsum(piece_comp, axis=0)
        acc_full = cum_full[hi].copy()
        acc_bar = cum_bar[hi].copy()
        acc_comp = cum_comp[hi].copy()
    if not (np.all(np.isfinite(cum_full)) and np.all(np.isfinite(cum_comp))):
        raise DynamicsError("Y quadrature produced non-finite values")

    def at(times):
        idx = np.searchsorted(cuts, np.asarray(times) / eps)
        idx = np.minimum(idx, n_pieces)
        return idx

    out = at(grid.output_times)
    Y = y0 + cum_full[out]
    Y0 = y0 + cum_bar[out]
    Y_scaled = cum_comp[out]
    Y_comp = np.empty_like(Y_scaled)
    for i in range(1, ell + 1):
        if i <= k:
            Y_comp[:, i - 1] = cum_comp[at(scaled_targets[i - 1]), i - 1]
        else:
            Y_comp[:, i - 1] = Y_scaled[:, i - 1]
    residual = float(np.max(np.abs(Y - Y0 - Y_scaled.sum(axis=1)))) if len(out) else 0.0
    return YResult(grid.output_times.copy(), Y, Y0, Y_comp, Y_scaled, residual)


def simulate_bundle(decomposed: DecomposedField, path, family: TimeScaleFamily, grid: ScenarioGrid, x0, zbar: AveragedPath, track_slow: bool = True, slow: SlowResult | None = None) -> TrajectoryBundle:
    """Full bundle for one realization (``Z`` skipped when ``track_slow`` is false)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    yres = integrate_Y(decomposed, path, family, grid, x0, zbar)
    if track_slow and slow is None:
        slow = integrate_slow(decomposed.spec, path, family, grid, x0, zbar)
    return TrajectoryBundle(
        epsilon=grid.epsilon,
        times=grid.output_times.copy(),
        Zbar=zbar(grid.output_times),
        Y=yres.Y,
        Y0=yres.Y0,
        Y_components=yres.Y_components,
        Y_scaled=yres.Y_scaled,
        identity_residual=yres.identity_residual,
        Z=None if slow is None else slow.Z,
        sup_deviation=None if slow is None or slow.sup_deviation is None else float(slow.sup_deviation),
        seed=getattr(path, "seed", None),
    )


def fluctuations(bundle: TrajectoryBundle) -> dict:
    """``G``, ``G_i`` (both conventions) and ``Q`` scaled by ``eps^{-1/2}``."""
    return {
        "G": bundle.G,
        "G_components": bundle.G_components,
        "G_scaled": bundle.G_scaled,
        "Q": bundle.Q,
    }


# ---------------------------------------------------------------------------
# block sums


def riemann_sum_G(decomposed: DecomposedField, path, family: TimeScaleFamily, N: int, t: float, zbar: AveragedPath) -> dict:
    """Block sums ``N^{-1/2} S_{i,N}(t)`` next to ``G_i^{1/N}(t)`` for every component.

    ``I_{i,N}(n)`` integrates ``B_i(Zbar(s/N), xi(q_1(s)), ...)`` over the
    unit block ``[n, n+1]`` of fast time; ``S_{i,N}(t)`` sums the blocks
    ``n = 0..[N tau_i(t)]``.  The bound ``2 K t d / sqrt(N)`` is checked.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    ell = decomposed.ell
    d = decomposed.d
    taus = np.array([float(tau(family, i, t)) for i in range(1, ell + 1)])
    last_block = np.floor(N * taus).astype(np.int64)
    U = float(last_block.max() + 1)
    if float(family.q(family.ell, U)) > path.horizon:
        raise DynamicsError("path horizon too short for the requested block sums")
    if float(U) / N > zbar.t_max + 1e-12:
        raise DynamicsError("averaged path too short for the requested block sums")
    parts = [np.arange(0.0, U + 1), N * taus, np.arange(0.0, U, 0.25)]
    if not path.spec.is_discrete:
        parts.append(switch_times(path, family, 0.0, U))
    cuts = np.unique(np.concatenate(parts))
    cuts = cuts[(cuts >= 0) & (cuts <= U)]
    a, b = cuts[:-1], cuts[1:]
    xi = _piece_arguments(path, family, 0.5 * (a + b))
    nodes = a[:, None] + (b - a)[:, None] * _GL2[None, :]
    zb = zbar(nodes / N)
    comp = decomposed.components(zb, np.broadcast_to(xi[:, None], (len(a), 2) + xi.shape[1:]))
    pieces = 0.5 * (b - a)[:, None, None] * comp.sum(axis=1)
    cum = np.concatenate([np.zeros((1, ell, d)), np.cumsum(pieces, axis=0)])
    riemann = np.empty((ell, d))
    G = np.empty((ell, d))
    for i in range(ell):
        riemann[i] = cum[np.searchsorted(cuts, last_block[i] + 1.0), i]
        G[i] = cum[np.searchsorted(cuts, N * taus[i]), i]
    riemann /= np.sqrt(N)
    G /= np.sqrt(N)
    bound = 2 * decomposed.spec.K * t * d / np.sqrt(N)
    diff = np.abs(riemann - G).max(axis=1)
    return {
        "riemann": riemann,
        "G": G,
        "difference": diff,
        "bound": float(bound),
        "within_bound": bool(np.all(diff <= bound)),
    }


# ---------------------------------------------------------------------------
# linear limit equation


@dataclass(eq=False)
class VolterraResult:
    """Solution of ``H = G + int_0^t grad(s) H(s) ds`` on the input grid."""

    times: np.ndarray
    H: np.ndarray
    refinement_error: float
    levels: int
    gronwall_C: float
    gronwall_holds: bool
    gronwall_slack: np.ndarray


def _trapezoid_volterra(times, G, mats):
    n, d = G.shape
    H = np.empty_like(G)
    H[0] = G[0]
    acc = np.zeros(d)
    eye = np.eye(d)
    prev = mats[0] @ H[0]
    for m in range(1, n):
        h = times[m] - times[m - 1]
        rhs = G[m] + acc + 0.5 * h * prev
        H[m] = np.linalg.solve(eye - 0.5 * h * mats[m], rhs)
        cur = mats[m] @ H[m]
        acc = acc + 0.5 * h * (prev + cur)
        prev = cur
    return H


def solve_limit_ode(G_path, grad_bar_B: Callable[[float], np.ndarray] | Callable, zbar: AveragedPath | None = None, times=None, tol: float = 1e-8, max_levels: int = 14, C: float | None = None) -> VolterraResult:
    """Solve the linear Volterra equation driven by ``G`` with kernel ``grad bar_B(Zbar(s))``.

    ``G_path`` is either a callable ``t -> (..., d)`` or a pair
    ``(times, values)``, in which case it is linearly interpolated between
    grid points.  ``grad_bar_B`` maps a state to a ``(d, d)`` matrix and is
    composed with ``zbar``; pass ``zbar=None`` to supply a function of time
    directly.  The trapezoidal product rule is refined by interval halving
    until values on the input grid change by less than ``tol``.

    The Gronwall bound ``|H(t)| <= |G(t)| + C e^{Ct} int_0^t |G|`` is checked
    on the grid, with ``C`` defaulting to the largest row sum of the kernel.
    """
    if callable(G_path):
        if times is None:
            raise ValueError("times are required when G_path is a callable")
        base_t = np.asarray(times, dtype=float)
        G_fun = G_path
    else:
        base_t, vals = G_path
        base_t = np.asarray(base_t, dtype=float)
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]

        def G_fun(t, _t=base_t, _v=vals):
            t = np.asarray(t, dtype=float)
            return np.stack([np.interp(t, _t, _v[:, c]) for c in range(_v.shape[1])], axis=-1)

    if base_t[0] != 0.0:
        base_t = np.concatenate(([0.0], base_t))
        prepended = True
    else:
        prepended = False
    G0 = np.atleast_2d(np.asarray(G_fun(base_t), dtype=float))
    if G0.shape[0] != len(base_t):
        G0 = G0.T
    if not np.all(np.isfinite(G0)):
        raise DynamicsError("non-finite input to the linear equation")

    def kernel(t):
        if zbar is None:
            return np.asarray(grad_bar_B(t), dtype=float)
        return np.asarray(grad_bar_B(zbar(t)), dtype=float)

    d = G0.shape[1]

    def solve_on(level):
        sub = 2**level
        fine = np.concatenate([np.linspace(base_t[j], base_t[j + 1], sub, endpoint=False) for j in range(len(base_t) - 1)] + [base_t[-1:]])
        Gf = np.atleast_2d(np.asarray(G_fun(fine), dtype=float)).reshape(len(fine), d)
        mats = np.array([np.atleast_2d(kernel(s)).reshape(d, d) for s in fine])
        return _trapezoid_volterra(fine, Gf, mats)[::sub], mats

    level = 2
    prev, mats = solve_on(level)
    err = np.inf
    max_points = 1 << 17
    while level < max_levels and (len(base_t) - 1) * 2 ** (level + 1) <= max_points:
        level += 1
        cur, mats = solve_on(level)
        err = float(np.max(np.abs(cur - prev)))
        prev = cur
        if err < tol:
            break
    H = prev
    if C is None:
        C = float(np.max(np.abs(mats).sum(axis=-1)))
    absG = np.linalg.norm(G0, axis=1)
    intG = np.concatenate(([0.0], np.cumsum(0.5 * np.diff(base_t) * (absG[1:] + absG[:-1]))))
    bound = absG + C * np.exp(C * base_t) * intG
    slack = bound - np.linalg.norm(H, axis=1)
    # the trapezoid for int|G| can undershoot slightly on coarse grids
    holds = bool(np.all(slack >= -1e-6 * (1 + bound)))
    if prepended:
        base_t, H, slack = base_t[1:], H[1:], slack[1:]
    return VolterraResult(base_t, H, err, level, C, holds, slack)
