"""Slow vector fields ``B(x, xi_1, ..., xi_l)``, their averages and centered components."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fast_process import DiscreteMeasure
from .time_scales import TimeScaleFamily, fast_arguments, switch_times

__all__ = [
    "FieldError",
    "FieldSpec",
    "PolynomialField",
    "DecomposedField",
    "FieldReport",
    "validate_field",
    "average_field",
    "decompose_field",
    "empirical_average",
    "field_catalog",
    "build_field",
]

DEFAULT_BUDGET = 1_000_000


class FieldError(ValueError):
    """Invalid field, non-finite values, or a quadrature request over budget."""


@dataclass(frozen=True, eq=False)
class FieldSpec:
    """Vector field ``B: R^d x R^{l*wp} -> R^d``.

    ``evaluator(x, xi)`` takes ``x`` of shape ``(..., d)`` and ``xi`` of shape
    ``(..., l, wp)`` and returns ``(..., d)``.  ``gradient(x, xi)`` returns
    ``(..., d, d)`` with ``[..., l, j] = dB^(l)/dx_j``; when omitted a central
    difference is used and ``gradient_is_numeric`` is set.
    """

    d: int
    ell: int
    wp: int
    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    K: float = 1.0
    kappa: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if self.d < 1 or self.ell < 1 or self.wp < 1:
            raise FieldError("dimensions d, l, wp must be positive")
        if not 0 < self.kappa <= 1:
            raise FieldError("kappa must lie in (0, 1]")

    @property
    def gradient_is_numeric(self) -> bool:
        return self.gradient is None

    def __call__(self, x, xi) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(x, dtype=float), np.asarray(xi, dtype=float)), dtype=float)

    def grad_x(self, x, xi) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        if self.gradient is not None:
            return np.asarray(self.gradient(x, xi), dtype=float)
        return _central_difference(lambda y: self(y, xi), x, self.d)


def _central_difference(func, x: np.ndarray, d: int) -> np.ndarray:
    step = 1e-5 * (1.0 + np.abs(x))
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        hj = step[..., j : j + 1]
        cols.append((func(x + hj * e) - func(x - hj * e)) / (2 * hj))
    return np.stack(cols, axis=-1)


class PolynomialField(FieldSpec):
    """Field whose components are polynomials in ``x`` and ``xi``.

    Each term carries a coefficient vector ``coef`` (length d), exponents
    ``x_exp`` (length d) and ``xi_exp`` (length l*wp, block-major).  Partial
    integrals against a discrete measure reduce to moment tables, so the
    decomposition is exact and cheap.
    """

    def __init__(self, d: int, ell: int, wp: int, coefs, x_exps, xi_exps, K: float = 1.0, kappa: float = 1.0, name: str = "polynomial"):
        coefs = np.atleast_2d(np.asarray(coefs, dtype=float))
        x_exps = np.atleast_2d(np.asarray(x_exps, dtype=np.int64)).reshape(len(coefs), d)
        xi_exps = np.atleast_2d(np.asarray(xi_exps, dtype=np.int64)).reshape(len(coefs), ell * wp)
        if coefs.shape[1] != d:
            raise FieldError("each coefficient vector must have length d")
        if np.any(x_exps < 0) or np.any(xi_exps < 0):
            raise FieldError("exponents must be nonnegative")
        object.__setattr__(self, "coefs", coefs)
        object.__setattr__(self, "x_exps", x_exps)
        object.__setattr__(self, "xi_exps", xi_exps)
        super().__init__(d, ell, wp, self._evaluate, self._gradient, K, kappa, name)

    @classmethod
    def from_terms(cls, d: int, ell: int, wp: int, terms: Sequence[dict], **kw) -> "PolynomialField":
        """Build from dicts ``{"coef": [...], "x": [...], "xi": [...]}``; missing exponents are 0."""
        if not terms:
            return cls(d, ell, wp, np.zeros((1, d)), np.zeros((1, d)), np.zeros((1, ell * wp)), **kw)
        coefs, xe, xie = [], [], []
        for t in terms:
            c = np.atleast_1d(np.asarray(t["coef"], dtype=float))
            if c.size == 1 and d > 1:
                raise FieldError("term coefficient must have one entry per slow component")
            coefs.append(c)
            xe.append(t.get("x", [0] * d))
            xie.append(t.get("xi", [0] * (ell * wp)))
        return cls(d, ell, wp, coefs, xe, xie, **kw)

    def _monomials(self, x, xi, x_exps):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        flat = xi.reshape(xi.shape[:-2] + (self.ell * self.wp,))
        batch = np.broadcast_shapes(x.shape[:-1], flat.shape[:-1])
        out = np.empty(batch + (len(x_exps),))
        # only nonzero integer powers are formed; exponents are small
        for t, (ex, exi) in enumerate(zip(x_exps, self.xi_exps)):
            m = np.ones(batch)
            for j in np.flatnonzero(ex):
                m = m * (x[..., j] if ex[j] == 1 else x[..., j] ** int(ex[j]))
            for j in np.flatnonzero(exi):
                m = m * (flat[..., j] if exi[j] == 1 else flat[..., j] ** int(exi[j]))
            out[..., t] = m
        return out

    def _evaluate(self, x, xi):
        mon = self._monomials(x, xi, self.x_exps)
        return (mon.reshape(-1, mon.shape[-1]) @ self.coefs).reshape(mon.shape[:-1] + (self.d,))

    def _gradient(self, x, xi):
        cols = []
        for j in range(self.d):
            e = self.x_exps[:, j]
            shifted = self.x_exps.copy()
            shifted[:, j] = np.maximum(e - 1, 0)
            cols.append(self._monomials(x, xi, shifted) @ (self.coefs * e[:, None]))
        return np.stack(cols, axis=-1)

    def integrate_out(self, mu: DiscreteMeasure, keep: int) -> "PolynomialField":
        """Integrate blocks ``keep+1..l`` against ``mu``; the result ignores those blocks."""
        atoms = np.asarray(mu.atoms, dtype=float)
        w = np.asarray(mu.weights, dtype=float)
        blocks = self.xi_exps.reshape(-1, self.ell, self.wp)
        factor = np.ones(len(self.coefs))
        for b in range(keep, self.ell):
            e = blocks[:, b, :]
            factor *= np.prod(atoms[None, :, :] ** e[:, None, :], axis=-1) @ w
        new_xi = blocks.copy()
        new_xi[:, keep:, :] = 0
        coefs = self.coefs * factor[:, None]
        # merge terms that became identical
        key = np.concatenate([self.x_exps, new_xi.reshape(len(coefs), -1)], axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        merged = np.zeros((len(uniq), self.d))
        np.add.at(merged, inv.ravel(), coefs)
        return PolynomialField(
            self.d, self.ell, self.wp, merged, uniq[:, : self.d], uniq[:, self.d :],
            K=self.K, kappa=self.kappa, name=f"{self.name}|int>{keep}",
        )


# ---------------------------------------------------------------------------
# regularity


@dataclass
class FieldReport:
    """Worst observed ratios for each inequality of the regularity conditions."""

    K: float
    kappa: float
    ratios: dict
    gradient_numeric: bool
    n_samples: int

    @property
    def passed(self) -> bool:
        return all(v <= self.K * (1 + 1e-6) for v in self.ratios.values())

    def as_dict(self) -> dict:
        return {
            "K": self.K,
            "kappa": self.kappa,
            "ratios": dict(self.ratios),
            "passed": self.passed,
            "gradient_numeric": self.gradient_numeric,
            "n_samples": self.n_samples,
        }


def validate_field(spec: FieldSpec, n_samples: int, seed: int, x_radius: float = 2.0, xi_box=(-1.0, 1.0)) -> FieldReport:
    """Sample point pairs in ``[-x_radius, x_radius]^d x xi_box^{l wp}`` and record worst ratios.

    The recorded quantities are ``max|B^(i)|``, the joint increment ratio
    ``|B(x,xi)-B(y,eta)| / (|x-y| + sum_j |xi_j-eta_j|^kappa)``, the
    x-Lipschitz and xi-Hoelder ratios separately, and the largest first and
    second x-derivatives.  All are lower bounds for the true suprema.
    """
    if n_samples < 1:
        raise FieldError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    lo, hi = xi_box
    shape_xi = (n_samples, spec.ell, spec.wp)
    x = rng.uniform(-x_radius, x_radius, (n_samples, spec.d))
    y = rng.uniform(-x_radius, x_radius, (n_samples, spec.d))
    xi = rng.uniform(lo, hi, shape_xi)
    eta = rng.uniform(lo, hi, shape_xi)
    # include box corners, where polynomial fields peak
    corners_x = np.array(list(itertools.product([-x_radius, x_radius], repeat=spec.d)))
    corners_xi = np.array(list(itertools.product([lo, hi], repeat=spec.ell * spec.wp))).reshape(-1, spec.ell, spec.wp)
    if len(corners_x) * len(corners_xi) <= 4096:
        cx = np.repeat(corners_x, len(corners_xi), axis=0)
        cxi = np.tile(corners_xi, (len(corners_x), 1, 1))
        x = np.concatenate([x, cx])
        y = np.concatenate([y, cx[::-1]])
        xi = np.concatenate([xi, cxi])
        eta = np.concatenate([eta, cxi[::-1]])
    bx = spec(x, xi)
    by = spec(y, eta)
    bxy = spec(y, xi)
    if not (np.all(np.isfinite(bx)) and np.all(np.isfinite(by)) and np.all(np.isfinite(bxy))):
        raise FieldError("field evaluator returned non-finite values")
    dx = np.abs(x - y).sum(axis=-1)
    dxi = (np.abs(xi - eta).sum(axis=-1) ** spec.kappa).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        joint = np.abs(bx - by).max(axis=-1) / (dx + dxi)
        lip_x = np.abs(bx - bxy).max(axis=-1) / dx
        hol = np.abs(bxy - by).max(axis=-1) / dxi
    grad = spec.grad_x(x, xi)
    second = _central_difference(lambda z: spec.grad_x(z, xi).reshape(z.shape[:-1] + (-1,)), x, spec.d)

    def worst(a):
        a = a[np.isfinite(a)]
        return float(a.max()) if a.size else 0.0

    ratios = {
        "bound": float(np.abs(np.concatenate([bx, by])).max()),
        "joint_increment": worst(joint),
        "lipschitz_x": worst(lip_x),
        "holder_xi": worst(hol),
        "first_derivative": float(np.abs(grad).max()),
        "second_derivative": float(np.abs(second).max()),
    }
    return FieldReport(spec.K, spec.kappa, ratios, spec.gradient_is_numeric, int(len(x)))


# ---------------------------------------------------------------------------
# averaging and decomposition


def _product_grid(mu: DiscreteMeasure, n_blocks: int, budget: int):
    n = len(mu.weights)
    if n_blocks == 0:
        return np.zeros((1, 0, mu.atoms.shape[1])), np.ones(1)
    if float(n) ** n_blocks > budget:
        raise FieldError(
            f"product quadrature needs {n}^{n_blocks} terms, above the budget {budget}; "
            "use a coarser measure (fewer quadrature nodes) or a polynomial field"
        )
    idx = np.array(list(itertools.product(range(n), repeat=n_blocks)), dtype=np.int64)
    atoms = np.asarray(mu.atoms, dtype=float)[idx]
    weights = np.prod(np.asarray(mu.weights)[idx], axis=1)
    return atoms, weights


def _partial_integral(spec: FieldSpec, mu: DiscreteMeasure, keep: int, budget: int, use_gradient: bool = False):
    """Callable ``(x, xi_head) -> int B(x, xi_head, .) dmu^{l-keep}``; ``xi_head`` has ``keep`` blocks."""
    tail_atoms, tail_w = _product_grid(mu, spec.ell - keep, budget)
    n_tail = len(tail_w)

    def func(x, xi_head):
        x = np.asarray(x, dtype=float)
        xi_head = np.asarray(xi_head, dtype=float)[..., :keep, :]
        batch = np.broadcast_shapes(x.shape[:-1], xi_head.shape[:-2])
        xb = np.broadcast_to(x, batch + (spec.d,))[..., None, :]
        head = np.broadcast_to(xi_head, batch + (keep, spec.wp))[..., None, :, :]
        head = np.broadcast_to(head, batch + (n_tail, keep, spec.wp))
        tail = np.broadcast_to(tail_atoms, batch + tail_atoms.shape)
        full = np.concatenate([head, tail], axis=-2)
        xb = np.broadcast_to(xb, batch + (n_tail, spec.d))
        vals = spec.grad_x(xb, full) if use_gradient else spec(xb, full)
        return np.tensordot(vals, tail_w, axes=([len(batch)], [0]))

    return func


def average_field(spec: FieldSpec, mu: DiscreteMeasure, budget: int = DEFAULT_BUDGET) -> Callable[[np.ndarray], np.ndarray]:
    """Averaged field ``x -> int B(x, xi) dmu^{(x) l}`` by exact product quadrature."""
    if isinstance(spec, PolynomialField):
        avg = spec.integrate_out(mu, 0)
        zero = np.zeros((spec.ell, spec.wp))
        return lambda x: avg(x, zero)
    part = _partial_integral(spec, mu, 0, budget)
    empty = np.zeros((0, spec.wp))
    return lambda x: part(x, empty)


@dataclass(eq=False)
class DecomposedField:
    """``B = bar_B + B_1 + ... + B_l`` with ``B_i`` depending on ``xi_1..xi_i`` only.

    ``partials[j]`` integrates out blocks ``j+1..l``; ``partials[l]`` is ``B``
    itself and ``partials[0]`` is ``bar_B`` (ignoring its xi argument).
    """

    spec: FieldSpec
    mu: DiscreteMeasure
    partials: list
    partial_gradients: list
    exact: bool
    budget: int = DEFAULT_BUDGET
    zero_components: tuple = field(default_factory=tuple)

    @property
    def ell(self) -> int:
        return self.spec.ell

    @property
    def d(self) -> int:
        return self.spec.d

    def bar_B(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.partials[0](x, np.zeros(x.shape[:-1] + (0, self.spec.wp)))

    def bar_B_gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.partial_gradients[0](x, np.zeros(x.shape[:-1] + (0, self.spec.wp)))

    def component(self, i: int, x, xi) -> np.ndarray:
        """``B_i(x, xi_1..xi_i)``; ``xi`` may carry more than ``i`` blocks (extra are ignored)."""
        if not 1 <= i <= self.ell:
            raise IndexError(f"component index {i} outside 1..{self.ell}")
        xi = np.asarray(xi, dtype=float)
        head = xi[..., :i, :]
        return self.partials[i](x, head) - self.partials[i - 1](x, head[..., : i - 1, :])

    def components(self, x, xi) -> np.ndarray:
        """All components stacked, shape ``(..., l, d)``."""
        xi = np.asarray(xi, dtype=float)
        levels = [self.partials[j](x, xi[..., :j, :]) for j in range(self.ell + 1)]
        return np.stack([levels[i] - levels[i - 1] for i in range(1, self.ell + 1)], axis=-2)

    def is_zero(self, i: int) -> bool:
        return i in self.zero_components


def decompose_field(spec: FieldSpec, mu: DiscreteMeasure, budget: int = DEFAULT_BUDGET) -> DecomposedField:
    """Differences of successive partial integrals over ``mu``."""
    if isinstance(spec, PolynomialField):
        polys = [spec.integrate_out(mu, j) for j in range(spec.ell + 1)]
        partials = [_poly_head(p) for p in polys]
        grads = [_poly_head(p, gradient=True) for p in polys]
        zero = []
        for i in range(1, spec.ell + 1):
            diff = _poly_equal(polys[i], polys[i - 1])
            if diff:
                zero.append(i)
        return DecomposedField(spec, mu, partials, grads, True, budget, tuple(zero))
    partials = [_partial_integral(spec, mu, j, budget) for j in range(spec.ell)]
    partials.append(lambda x, xi: spec(x, xi))
    grads = [_partial_integral(spec, mu, j, budget, use_gradient=True) for j in range(spec.ell)]
    grads.append(lambda x, xi: spec.grad_x(x, xi))
    return DecomposedField(spec, mu, partials, grads, False, budget)


def _poly_head(poly: PolynomialField, gradient: bool = False):
    def func(x, xi_head):
        x = np.asarray(x, dtype=float)
        xi_head = np.asarray(xi_head, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], xi_head.shape[:-2])
        full = np.zeros(batch + (poly.ell, poly.wp))
        j = xi_head.shape[-2]
        full[..., :j, :] = xi_head
        return poly.grad_x(x, full) if gradient else poly(x, full)

    return func


def _poly_equal(a: PolynomialField, b: PolynomialField) -> bool:
    """True when the two polynomials coincide (so their difference vanishes identically)."""
    def table(p):
        out = {}
        for c, xe, xie in zip(p.coefs, p.x_exps, p.xi_exps):
            key = (tuple(xe), tuple(xie))
            out[key] = out.get(key, 0) + c
        return out

    ta, tb = table(a), table(b)
    for key in set(ta) | set(tb):
        if np.any(np.abs(ta.get(key, 0) - tb.get(key, 0)) > 1e-14):
            return False
    return True


# ---------------------------------------------------------------------------
# time averages along a realization


def empirical_average(spec: FieldSpec, path, family: TimeScaleFamily, x, T_window: float) -> np.ndarray:
    """Time average of ``B(x, xi(q_1(t)), ..., xi(q_l(t)))`` over ``[0, T_window]``.

    Continuous time integrates exactly between switch times (the integrand is
    piecewise constant); discrete time takes the plain mean over
    ``n = 0, ..., T_window - 1``.
    """
    x = np.asarray(x, dtype=float)
    top = float(family.q(family.ell, T_window))
    if top > path.horizon:
        raise FieldError(f"q_l(T_window) = {top:g} exceeds the path horizon {path.horizon:g}")
    if path.spec.is_discrete:
        n = np.arange(int(np.floor(T_window)))
        xi = fast_arguments(path, family, n)
        return spec(np.broadcast_to(x, (len(n), spec.d)), xi).mean(axis=0)
    cuts = np.concatenate(([0.0], switch_times(path, family, 0.0, T_window), [T_window]))
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    xi = fast_arguments(path, family, mids)
    vals = spec(np.broadcast_to(x, (len(mids), spec.d)), xi)
    return (np.diff(cuts) @ vals) / T_window


# ---------------------------------------------------------------------------
# catalog


def _product_linear(a: float = 1.0, c: float = 1.0, b: float = 0.0, ell: int = 2, K: float | None = None):
    terms = [{"coef": [-a], "x": [1], "xi": [0] * ell}, {"coef": [c], "x": [0], "xi": [1, 1] + [0] * (ell - 2)}]
    if ell >= 3 and b != 0:
        terms.append({"coef": [b], "x": [0], "xi": [0] * (ell - 1) + [1]})
    if K is None:
        K = max(2 * abs(a) + abs(c) + abs(b), abs(a), abs(c), abs(b))
    return PolynomialField.from_terms(1, ell, 1, terms, K=K, kappa=1.0, name="product_linear")


def _linear(a: float = 1.0, ell: int = 2, d: int = 1, K: float | None = None):
    terms = []
    for m in range(d):
        xe = [0] * d
        xe[m] = 1
        coef = [0.0] * d
        coef[m] = -a
        terms.append({"coef": coef, "x": xe, "xi": [0] * ell})
    return PolynomialField.from_terms(d, ell, 1, terms, K=K if K is not None else 2 * abs(a), name="linear")


def _zero(ell: int = 2, d: int = 1, wp: int = 1, K: float = 1.0):
    return PolynomialField.from_terms(d, ell, wp, [], K=K, name="zero")


def _constant(c: float = 1.0, ell: int = 2, K: float | None = None):
    return PolynomialField.from_terms(1, ell, 1, [{"coef": [c], "x": [0], "xi": [0] * ell}], K=K if K is not None else abs(c), name="constant")


def _polynomial(d: int, ell: int, wp: int = 1, terms: Sequence[dict] = (), K: float = 1.0, kappa: float = 1.0):
    return PolynomialField.from_terms(d, ell, wp, list(terms), K=K, kappa=kappa, name="polynomial")


_CATALOG = {
    "product_linear": (_product_linear, "-a*x + c*xi1*xi2 (+ b*xi_l when l >= 3)"),
    "linear": (_linear, "-a*x, independent of the fast arguments"),
    "zero": (_zero, "identically zero"),
    "constant": (_constant, "constant c"),
    "polynomial": (_polynomial, "coefficient table: terms = [{coef, x, xi}, ...]"),
}


def field_catalog() -> dict:
    """Names and one-line descriptions of the built-in fields."""
    return {k: v[1] for k, v in _CATALOG.items()}


def build_field(name: str, **params) -> FieldSpec:
    if name not in _CATALOG:
        raise FieldError(f"unknown field {name!r}; available: {', '.join(sorted(_CATALOG))}")
    return _CATALOG[name][0](**params)
