"""Fast driving processes: finite-state Markov chains and the dyadic doubling map.

A fast process is anything that can produce a realization ``xi(t)`` on a
horizon and, where possible, report its one-time law ``mu`` and two-time law
``mu_s`` under the stationary measure.  Simulations always start from the
chain's ``initial_law`` (the "Pr" side); the theoretical laws are stationary
(the "P" side).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.linalg import expm
from scipy.sparse.csgraph import connected_components

__all__ = [
    "DiscreteMeasure",
    "JointMeasure",
    "FiniteChainSpec",
    "DyadicMapSpec",
    "ChainPath",
    "DyadicPath",
    "ProcessError",
    "sample_path",
    "stationary_law",
    "joint_law",
    "correlation",
    "transition_kernel",
    "transition_kernels",
    "spectral_gap",
]

_CHUNK = 1 << 14
_MANTISSA_BITS = 53


class ProcessError(ValueError):
    """Invalid process definition or request outside a process's support."""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported measure on R^wp: ``atoms`` (n, wp) and ``weights`` (n,)."""

    atoms: np.ndarray
    weights: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def expect(self, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.tensordot(self.weights, func(self.atoms), axes=(0, 0))


@dataclass(frozen=True, eq=False)
class JointMeasure:
    """Finitely supported measure on R^wp x R^wp given as weighted pairs."""

    first: np.ndarray
    second: np.ndarray
    weights: np.ndarray

    def marginal(self, which: int = 0) -> DiscreteMeasure:
        atoms = self.first if which == 0 else self.second
        uniq, inverse = np.unique(atoms, axis=0, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inverse.ravel(), self.weights)
        return DiscreteMeasure(uniq, w)

    def second_moment(self) -> np.ndarray:
        return np.einsum("k,ki,kj->ij", self.weights, self.first, self.second)


def _as_matrix_observable(observable, n_states: int) -> np.ndarray:
    obs = np.asarray(observable, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.shape[0] != n_states:
        raise ProcessError(f"observable has {obs.shape[0]} rows, chain has {n_states} states")
    return obs


@dataclass(frozen=True, eq=False)
class FiniteChainSpec:
    """Finite-state Markov chain observed through ``observable``.

    ``generator`` is a rate matrix (rows sum to 0) when ``time_kind`` is
    ``"continuous"`` and a stochastic matrix (rows sum to 1) when it is
    ``"discrete"``.
    """

    generator: np.ndarray
    observable: np.ndarray
    initial_law: np.ndarray
    time_kind: str = "continuous"
    states: tuple = ()

    def __post_init__(self):
        gen = np.atleast_2d(np.asarray(self.generator, dtype=float))
        n = gen.shape[0]
        if gen.shape != (n, n):
            raise ProcessError("generator must be square")
        obs = _as_matrix_observable(self.observable, n)
        init = np.asarray(self.initial_law, dtype=float).ravel()
        if self.time_kind not in ("continuous", "discrete"):
            raise ProcessError(f"unknown time_kind {self.time_kind!r}")
        off = gen - np.diag(np.diag(gen))
        if self.time_kind == "continuous":
            if np.any(off < 0):
                raise ProcessError("off-diagonal rates must be nonnegative")
            if not np.allclose(gen.sum(axis=1), 0.0, atol=1e-12):
                raise ProcessError("generator rows must sum to 0")
        else:
            if np.any(gen < 0) or np.any(gen > 1):
                raise ProcessError("transition probabilities must lie in [0, 1]")
            if not np.allclose(gen.sum(axis=1), 1.0, atol=1e-12):
                raise ProcessError("transition matrix rows must sum to 1")
        if init.shape != (n,) or np.any(init < 0) or abs(init.sum() - 1.0) > 1e-12:
            raise ProcessError("initial_law must be a probability vector over the states")
        n_comp, _ = connected_components(off > 0, directed=True, connection="strong")
        if n_comp != 1:
            raise ProcessError("chain is reducible")
        object.__setattr__(self, "generator", gen)
        object.__setattr__(self, "observable", obs)
        object.__setattr__(self, "initial_law", init)
        if not self.states:
            object.__setattr__(self, "states", tuple(range(n)))

    @property
    def n_states(self) -> int:
        return self.generator.shape[0]

    @property
    def dim(self) -> int:
        return self.observable.shape[1]

    @property
    def is_discrete(self) -> bool:
        return self.time_kind == "discrete"


@dataclass(frozen=True, eq=False)
class DyadicMapSpec:
    """Doubling map ``x -> 2x mod 1`` on [0, 1) observed through ``observable``.

    ``observable`` maps an array of points (n,) to values (n, wp) or (n,).
    The Hoelder exponent and constant describe the observable and are
    spot-checked on a grid at construction.
    """

    observable: Callable[[np.ndarray], np.ndarray]
    holder_exponent: float = 1.0
    holder_constant: float = 1.0
    digits_max: int = 10_000_000
    quadrature_nodes: int = 4096
    time_kind: str = field(default="discrete", init=False)

    def __post_init__(self):
        if not 0 < self.holder_exponent <= 1:
            raise ProcessError("holder_exponent must lie in (0, 1]")
        grid = (np.arange(257) + 0.5) / 257
        vals = self.evaluate(grid)
        dv = np.abs(vals[:, None, :] - vals[None, :, :]).sum(axis=-1)
        dx = np.abs(grid[:, None] - grid[None, :]) ** self.holder_exponent
        np.fill_diagonal(dx, 1.0)
        worst = float(np.max(dv / dx))
        if worst > self.holder_constant * (1 + 1e-6):
            raise ProcessError(
                f"observable Hoelder ratio {worst:.6g} exceeds holder_constant {self.holder_constant}"
            )

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        vals = np.asarray(self.observable(np.asarray(x, dtype=float)), dtype=float)
        if vals.ndim == np.ndim(x):
            vals = vals[..., None]
        return vals

    @property
    def dim(self) -> int:
        return self.evaluate(np.array([0.5])).shape[-1]

    @property
    def is_discrete(self) -> bool:
        return True


ProcessSpec = Union[FiniteChainSpec, DyadicMapSpec]


# ---------------------------------------------------------------------------
# paths


@dataclass(eq=False)
class ChainPath:
    """Right-continuous piecewise-constant chain realization on [0, horizon].

    ``jump_times[0] == 0`` and ``states[k]`` is occupied on
    ``[jump_times[k], jump_times[k+1])``.
    """

    spec: FiniteChainSpec
    seed: int
    horizon: float
    jump_times: np.ndarray
    states: np.ndarray

    def state_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.horizon):
            raise ProcessError("evaluation time outside [0, horizon]")
        if self.spec.is_discrete:
            t = np.floor(t)
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        return self.states[idx]

    def __call__(self, t) -> np.ndarray:
        return self.spec.observable[self.state_at(t)]

    def jumps_in(self, t0: float, t1: float) -> np.ndarray:
        """Jump times in the open interval (t0, t1)."""
        lo = np.searchsorted(self.jump_times, t0, side="right")
        hi = np.searchsorted(self.jump_times, t1, side="left")
        return self.jump_times[lo:hi]


@dataclass(eq=False)
class DyadicPath:
    """Orbit of a seeded point under the doubling map, integer times only."""

    spec: DyadicMapSpec
    seed: int
    horizon: int
    digits: np.ndarray

    def point_at(self, n) -> np.ndarray:
        n = np.asarray(n)
        if np.any(n < 0) or np.any(n > self.horizon):
            raise ProcessError("evaluation time outside [0, horizon]")
        if np.any(n != np.floor(n)):
            raise ProcessError("the doubling map is defined at integer times only")
        n = n.astype(np.int64)
        offsets = np.arange(1, _MANTISSA_BITS + 1)
        bits = self.digits[n[..., None] + offsets - 1]
        return bits @ np.ldexp(1.0, -offsets)

    def __call__(self, n) -> np.ndarray:
        return self.spec.evaluate(self.point_at(n))

    def jumps_in(self, t0: float, t1: float) -> np.ndarray:
        return np.arange(np.floor(t0) + 1, np.ceil(t1), dtype=float)


def _successor_tables(spec: FiniteChainSpec):
    gen = spec.generator
    n = spec.n_states
    if spec.is_discrete:
        stay = np.diag(gen).copy()
        leave = 1.0 - stay
        jump = gen - np.diag(stay)
    else:
        leave = -np.diag(gen)
        jump = gen + np.diag(leave)
        stay = None
    with np.errstate(invalid="ignore", divide="ignore"):
        jump = np.where(leave[:, None] > 0, jump / leave[:, None], 0.0)
    cum = np.cumsum(jump, axis=1)
    cum[:, -1] = np.where(leave > 0, 1.0, cum[:, -1])
    deterministic = np.count_nonzero(jump > 0, axis=1) <= 1
    succ = np.argmax(jump, axis=1) if deterministic.all() else None
    return leave, stay, cum, succ, n


def _embedded_chain(start: int, u: np.ndarray, cum: np.ndarray, succ) -> np.ndarray:
    out = np.empty(len(u), dtype=np.int64)
    if succ is not None:
        # irreducible with deterministic jumps: the states form a single cycle
        cycle = [start]
        while len(cycle) < len(succ):
            cycle.append(int(succ[cycle[-1]]))
        return np.asarray(cycle, dtype=np.int64)[(np.arange(1, len(u) + 1)) % len(cycle)]
    rows = [list(r) for r in cum]
    from bisect import bisect_right

    s = start
    for k, uk in enumerate(u.tolist()):
        row = rows[s]
        s = min(bisect_right(row, uk), len(row) - 1)
        out[k] = s
    return out


def _sample_chain(spec: FiniteChainSpec, horizon: float, seed: int) -> ChainPath:
    rng = np.random.default_rng(seed)
    leave, stay, cum, succ, n = _successor_tables(spec)
    s0 = int(rng.choice(n, p=spec.initial_law))
    if n == 1 or leave[s0] == 0:
        return ChainPath(spec, seed, horizon, np.zeros(1), np.array([s0]))
    times = [np.zeros(1)]
    states = [np.array([s0])]
    t_now, s_now = 0.0, s0
    # fixed chunk size keeps a realization prefix-consistent across horizons
    while t_now <= horizon:
        u_next = rng.random(_CHUNK)
        u_hold = rng.random(_CHUNK)
        nxt = _embedded_chain(s_now, u_next, cum, succ)
        occupied = np.concatenate(([s_now], nxt[:-1]))
        if spec.is_discrete:
            p_stay = stay[occupied]
            with np.errstate(divide="ignore"):
                extra = np.where(p_stay > 0, np.floor(np.log1p(-u_hold) / np.log(np.where(p_stay > 0, p_stay, 0.5))), 0.0)
            holds = 1.0 + extra
        else:
            holds = -np.log1p(-u_hold) / leave[occupied]
        jt = t_now + np.cumsum(holds)
        times.append(jt)
        states.append(nxt)
        t_now, s_now = float(jt[-1]), int(nxt[-1])
    jump_times = np.concatenate(times)
    all_states = np.concatenate(states)
    keep = np.searchsorted(jump_times, horizon, side="right")
    return ChainPath(spec, seed, horizon, jump_times[:keep], all_states[:keep])


def _sample_dyadic(spec: DyadicMapSpec, horizon: float, seed: int) -> DyadicPath:
    n_digits = int(np.floor(horizon)) + _MANTISSA_BITS
    if n_digits > spec.digits_max:
        raise ProcessError(
            f"horizon {horizon} needs {n_digits} binary digits, budget is {spec.digits_max}"
        )
    rng = np.random.default_rng(seed)
    n_total = int(np.ceil(n_digits / _CHUNK)) * _CHUNK
    digits = rng.integers(0, 2, size=n_total, dtype=np.int8).astype(float)
    return DyadicPath(spec, seed, int(np.floor(horizon)), digits)


def sample_path(spec: ProcessSpec, horizon: float, seed: int):
    """Draw one realization of ``spec`` on ``[0, horizon]``.

    Chains are simulated exactly from exponential (continuous time) or
    geometric (discrete time) holding times; no time discretization is used.
    """
    if not horizon > 0:
        raise ProcessError("horizon must be positive")
    if isinstance(spec, FiniteChainSpec):
        return _sample_chain(spec, float(horizon), int(seed))
    if isinstance(spec, DyadicMapSpec):
        return _sample_dyadic(spec, horizon, int(seed))
    raise ProcessError(f"unsupported process {type(spec).__name__}")


# ---------------------------------------------------------------------------
# laws


def _stationary_vector(spec: FiniteChainSpec) -> np.ndarray:
    gen = spec.generator
    n = spec.n_states
    lhs = gen.T - (np.eye(n) if spec.is_discrete else 0.0)
    lhs = np.vstack([lhs, np.ones(n)])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def transition_kernel(spec: FiniteChainSpec, s: float) -> np.ndarray:
    """Transition matrix over lag ``s`` (matrix exponential or matrix power)."""
    if s < 0:
        raise ProcessError("lag must be nonnegative")
    if spec.is_discrete:
        if s != int(s):
            raise ProcessError("discrete-time chains need integer lags")
        return np.linalg.matrix_power(spec.generator, int(s))
    return expm(spec.generator * s)


def transition_kernels(spec: FiniteChainSpec, lags) -> np.ndarray:
    """Transition matrices for a batch of nonnegative lags, shape ``(len(lags), n, n)``.

    Uses one eigendecomposition of the generator when it is well conditioned
    and falls back to per-lag ``expm`` / matrix powers otherwise.  Zero lags
    give the identity exactly.
    """
    lags = np.atleast_1d(np.asarray(lags, dtype=float))
    if np.any(lags < 0):
        raise ProcessError("lag must be nonnegative")
    gen = spec.generator
    n = spec.n_states
    if spec.is_discrete:
        r = np.rint(lags)
        if np.any(np.abs(r - lags) > 1e-9):
            raise ProcessError("discrete-time chains need integer lags")
        lags = r
    K = np.empty((len(lags), n, n))
    ev, V = np.linalg.eig(gen)
    if np.linalg.cond(V) < 1e6:
        Vinv = np.linalg.inv(V)
        if spec.is_discrete:
            with np.errstate(divide="ignore", invalid="ignore"):
                powers = np.where(lags[:, None] == 0, 1.0 + 0j, ev[None, :].astype(complex) ** lags[:, None])
        else:
            powers = np.exp(ev[None, :] * lags[:, None])
        K[:] = np.einsum("ij,sj,jk->sik", V, powers, Vinv).real
    else:
        for idx, s in enumerate(lags):
            K[idx] = np.linalg.matrix_power(gen, int(s)) if spec.is_discrete else expm(gen * s)
    K[lags == 0] = np.eye(n)
    return K


def spectral_gap(spec: FiniteChainSpec) -> float:
    """Exponential decay rate of the kernel towards stationarity.

    For discrete time this is ``-log`` of the second largest eigenvalue
    modulus, so both time kinds decay like ``exp(-gap * s)``.
    """
    if spec.n_states == 1:
        return np.inf
    ev = np.linalg.eigvals(spec.generator)
    if spec.is_discrete:
        mods = np.sort(np.abs(ev))[::-1]
        second = mods[1]
        return np.inf if second == 0 else float(-np.log(second))
    re = np.sort(-ev.real)
    return float(re[1])


def _quadrature_nodes(spec: DyadicMapSpec, n_nodes: int | None) -> np.ndarray:
    n = spec.quadrature_nodes if n_nodes is None else int(n_nodes)
    return (np.arange(n) + 0.5) / n


def stationary_law(spec: ProcessSpec, n_nodes: int | None = None) -> DiscreteMeasure:
    """One-time stationary law ``mu`` as a discrete measure.

    Chains give the exact left null vector of the generator pushed through
    the observable; the doubling map gives Lebesgue measure represented by
    midpoint nodes.
    """
    if isinstance(spec, FiniteChainSpec):
        return DiscreteMeasure(spec.observable.copy(), _stationary_vector(spec))
    nodes = _quadrature_nodes(spec, n_nodes)
    return DiscreteMeasure(spec.evaluate(nodes), np.full(len(nodes), 1.0 / len(nodes)))


def stationary_vector(spec: FiniteChainSpec) -> np.ndarray:
    """Stationary distribution over chain states (not pushed through the observable)."""
    return _stationary_vector(spec)


def joint_law(spec: ProcessSpec, s: float, n_nodes: int | None = None, budget: int = 1_000_000) -> JointMeasure:
    """Stationary law of ``(xi(t), xi(t + s))``.

    For chains ``weight(a, b) = mu(a) * K_s(a, b)``.  For the doubling map
    the pair is ``(g(x), g(T^s x))`` with ``x`` Lebesgue; it is represented
    exactly through the ``2**s`` preimage branches of each node, which stays
    within ``budget`` pairs by coarsening the node set.
    """
    if s < 0:
        raise ProcessError("lag must be nonnegative")
    if isinstance(spec, FiniteChainSpec):
        pi = _stationary_vector(spec)
        w = pi[:, None] * transition_kernel(spec, s)
        n = spec.n_states
        a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return JointMeasure(spec.observable[a.ravel()], spec.observable[b.ravel()], w.ravel())
    if s != int(s):
        raise ProcessError("the doubling map needs integer lags")
    s = int(s)
    n = spec.quadrature_nodes if n_nodes is None else int(n_nodes)
    branches = 2**s if s < 62 else None
    if branches is not None and branches * n <= budget:
        y = (np.arange(n) + 0.5) / n
        j = np.arange(branches)
        x = ((j[:, None] + y[None, :]) / branches).ravel()
        first = spec.evaluate(x)
        second = spec.evaluate(np.tile(y, branches))
        return JointMeasure(first, second, np.full(len(x), 1.0 / len(x)))
    # at this lag g(x) and g(T^s x) are independent up to C * 2^(-s*kappa)
    m = int(np.sqrt(budget))
    y = (np.arange(m) + 0.5) / m
    va = spec.evaluate(y)
    ia, ib = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    return JointMeasure(va[ia.ravel()], va[ib.ravel()], np.full(m * m, 1.0 / (m * m)))


def correlation(spec: ProcessSpec, s: float, n_nodes: int | None = None) -> np.ndarray:
    """Second mixed moment ``E_P[xi(0) (x) xi(s)]`` as a (wp, wp) matrix."""
    if isinstance(spec, FiniteChainSpec):
        pi = _stationary_vector(spec)
        obs = spec.observable
        return obs.T @ (pi[:, None] * transition_kernel(spec, s)) @ obs
    return joint_law(spec, s, n_nodes).second_moment()


def two_state_chain(rate_01: float = 1.0, rate_10: float = 1.0, values=(1.0, -1.0), initial=(1.0, 0.0)) -> FiniteChainSpec:
    """Continuous-time two-state chain with the given switching rates."""
    gen = np.array([[-rate_01, rate_01], [rate_10, -rate_10]], dtype=float)
    return FiniteChainSpec(gen, np.asarray(values, dtype=float)[:, None], np.asarray(initial, dtype=float))


def as_observable_array(values: Sequence) -> np.ndarray:
    return _as_matrix_observable(values, len(values))
