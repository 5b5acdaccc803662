"""Seeded ensembles of trajectory bundles and the statistical checks built on them.

Every path seed depends only on ``(base_seed, path index)``, so the same
realizations of the fast process are reused across the eps grid (common
random numbers).  Work is split into fixed batches of seeds and results are
assembled in seed order, which makes reports independent of the thread
count and scheduling.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .covariance import CovarianceReport
from .dynamics import solve_limit_ode
from .scenario import Scenario, derive_seed

__all__ = [
    "EnsembleError",
    "EpsilonEnsemble",
    "EnsembleReport",
    "run_ensemble",
    "bootstrap_cov",
    "compare_covariance",
    "vanishing_trend",
    "normality_tests",
    "cross_covariance_trend",
    "q_consistency",
    "holm",
    "report_from_samples",
    "default_threads",
]

N_BOOT = 1000
THREADS_ENV = "NONCONVAVG_THREADS"


class EnsembleError(RuntimeError):
    """A realization failed; the message names eps and the seed."""


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# bootstrap


def bootstrap_cov(X: np.ndarray, n_boot: int = N_BOOT, seed: int = 0, level: float = 0.95, chunk: int = 50) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample covariance of ``X`` (M, p) with percentile bootstrap bounds, each ``(p, p)``."""
    X = np.asarray(X, dtype=float)
    M, p = X.shape
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1)) if M > 1 else np.zeros((p, p))
    rng = np.random.default_rng(seed)
    boots = np.empty((n_boot, p, p))
    for lo in range(0, n_boot, chunk):
        idx = rng.integers(0, M, size=(min(chunk, n_boot - lo), M))
        Xb = X[idx]
        Xc = Xb - Xb.mean(axis=1, keepdims=True)
        boots[lo:lo + len(idx)] = np.einsum("bmi,bmj->bij", Xc, Xc) / max(M - 1, 1)
    a = (1.0 - level) / 2
    lo_q, hi_q = np.quantile(boots, [a, 1 - a], axis=0)
    return cov, lo_q, hi_q


def _moments(X: np.ndarray) -> dict:
    """Mean, covariance, skewness and excess kurtosis per column of ``X`` (M, p)."""
    M = X.shape[0]
    out = {"mean": X.mean(axis=0), "cov": np.atleast_2d(np.cov(X, rowvar=False, ddof=1)) if M > 1 else np.zeros((X.shape[1],) * 2)}
    sd = X.std(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out["skewness"] = np.where(sd > 0, stats.skew(X, axis=0), 0.0)
        out["excess_kurtosis"] = np.where(sd > 0, stats.kurtosis(X, axis=0), 0.0)
    return out


# ---------------------------------------------------------------------------
# ensembles


@dataclass(eq=False)
class EpsilonEnsemble:
    """Raw samples for one eps: ``G`` (M, T, d), ``G_components`` (M, T, l, d), ``Q`` or None."""

    epsilon: float
    seeds: np.ndarray
    times: np.ndarray
    G: np.ndarray
    G_components: np.ndarray
    G_scaled: np.ndarray
    Q: np.ndarray | None
    sup_deviation: np.ndarray | None
    identity_residual: float
    wall_time: float
    stats: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.seeds)

    def variance_G(self, t_index: int = -1) -> np.ndarray:
        return self.stats["G"][t_index]["cov"]


@dataclass(eq=False)
class EnsembleReport:
    scenario: str
    base_seed: int
    runs: list
    n_boot: int
    threads: int
    metadata: dict = field(default_factory=dict)

    @property
    def epsilons(self) -> list:
        return [r.epsilon for r in self.runs]

    def at(self, epsilon: float) -> EpsilonEnsemble:
        for r in self.runs:
            if np.isclose(r.epsilon, epsilon, rtol=1e-12, atol=0):
                return r
        raise KeyError(f"no ensemble at eps = {epsilon}")

    def stat_rows(self) -> list[dict]:
        """Flat rows (eps, quantity, t, l, m, value, ci_lo, ci_hi) for CSV output."""
        rows = []
        for r in self.runs:
            for name in ("G", "Q"):
                if name not in r.stats:
                    continue
                for ti, st in enumerate(r.stats[name]):
                    t = float(r.times[ti])
                    d = len(st["mean"])
                    for l in range(d):
                        rows.append({"eps": r.epsilon, "quantity": f"mean_{name}", "t": t, "l": l, "m": -1, "value": float(st["mean"][l]), "ci_lo": np.nan, "ci_hi": np.nan})
                        rows.append({"eps": r.epsilon, "quantity": f"skew_{name}", "t": t, "l": l, "m": -1, "value": float(st["skewness"][l]), "ci_lo": np.nan, "ci_hi": np.nan})
                        rows.append({"eps": r.epsilon, "quantity": f"exkurt_{name}", "t": t, "l": l, "m": -1, "value": float(st["excess_kurtosis"][l]), "ci_lo": np.nan, "ci_hi": np.nan})
                        for m in range(d):
                            rows.append({"eps": r.epsilon, "quantity": f"cov_{name}", "t": t, "l": l, "m": m, "value": float(st["cov"][l, m]), "ci_lo": float(st["ci_lo"][l, m]), "ci_hi": float(st["ci_hi"][l, m])})
            if r.sup_deviation is not None:
                rows.append({"eps": r.epsilon, "quantity": "median_sup_deviation", "t": float(r.times[-1]), "l": -1, "m": -1, "value": float(np.median(r.sup_deviation)), "ci_lo": np.nan, "ci_hi": np.nan})
        return rows


def _simulate_chunk(scenario: Scenario, epsilon: float, seeds: list) -> list:
    try:
        return scenario.simulate(epsilon, seeds)
    except Exception as exc:  # locate the failing seed
        for s in seeds:
            try:
                scenario.simulate(epsilon, [s])
            except Exception as inner:
                raise EnsembleError(f"eps = {epsilon:g}, seed {s}: {inner}") from inner
        raise EnsembleError(f"eps = {epsilon:g}, seeds {seeds[0]}..{seeds[-1]}: {exc}") from exc


def _summarize(run: EpsilonEnsemble, n_boot: int, boot_seed: int):
    T = len(run.times)
    for name, arr in (("G", run.G), ("Q", run.Q)):
        if arr is None:
            continue
        per_t = []
        for ti in range(T):
            X = arr[:, ti, :]
            st = _moments(X)
            _, lo, hi = bootstrap_cov(X, n_boot, derive_seed(boot_seed, ti, 0 if name == "G" else 1))
            st["ci_lo"], st["ci_hi"] = lo, hi
            per_t.append(st)
        run.stats[name] = per_t
    # cross-covariances of all components at all times
    flat = run.G_components.reshape(run.M, -1)
    cov, lo, hi = bootstrap_cov(flat, n_boot, derive_seed(boot_seed, T, 2))
    run.stats["components"] = {"cov": cov, "ci_lo": lo, "ci_hi": hi, "shape": run.G_components.shape[1:]}


def run_ensemble(scenario: Scenario, M: int, epsilon_list: Sequence[float], base_seed: int, threads: int | None = None, n_boot: int = N_BOOT) -> EnsembleReport:
    """``M`` bundles per eps with seeds ``derive_seed(base_seed, m)``.

    Statistics (means, covariances, skewness, kurtosis, bootstrap CIs) are
    attached to each :class:`EpsilonEnsemble`.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    if not len(epsilon_list):
        raise ValueError("epsilon_list is empty")
    threads = default_threads() if threads is None else max(1, int(threads))
    seeds = [derive_seed(base_seed, m) for m in range(M)]
    bs = scenario.batch_size
    chunks = [seeds[lo:lo + bs] for lo in range(0, M, bs)]
    runs = []
    for e_idx, eps in enumerate(epsilon_list):
        t0 = time.perf_counter()
        if threads == 1:
            results = [_simulate_chunk(scenario, eps, c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda c: _simulate_chunk(scenario, eps, c), chunks))
        bundles = [b for chunk in results for b in chunk]
        wall = time.perf_counter() - t0
        has_Q = all(b.Z is not None for b in bundles)
        run = EpsilonEnsemble(
            epsilon=float(eps),
            seeds=np.array(seeds, dtype=np.uint64),
            times=scenario.output_times.copy(),
            G=np.stack([b.G for b in bundles]),
            G_components=np.stack([b.G_components for b in bundles]),
            G_scaled=np.stack([b.G_scaled for b in bundles]),
            Q=np.stack([b.Q for b in bundles]) if has_Q else None,
            sup_deviation=np.array([b.sup_deviation for b in bundles]) if has_Q else None,
            identity_residual=float(max(b.identity_residual for b in bundles)),
            wall_time=wall,
        )
        _summarize(run, n_boot, derive_seed(base_seed, 1_000_003, e_idx))
        runs.append(run)
    return EnsembleReport(scenario.name, int(base_seed), runs, n_boot, threads, {"M": M})


def report_from_samples(G: np.ndarray, times, G_components: np.ndarray | None = None, Q: np.ndarray | None = None, epsilon: float = 0.0, base_seed: int = 0, n_boot: int = N_BOOT, name: str = "samples") -> EnsembleReport:
    """Wrap externally produced samples ``G`` (M, T, d) as a one-eps report."""
    G = np.asarray(G, dtype=float)
    M = G.shape[0]
    comps = G[:, :, None, :] if G_components is None else np.asarray(G_components, dtype=float)
    run = EpsilonEnsemble(float(epsilon), np.arange(M, dtype=np.uint64), np.asarray(times, dtype=float), G, comps, comps, Q, None, 0.0, 0.0)
    _summarize(run, n_boot, derive_seed(base_seed, 4_000_037))
    return EnsembleReport(name, base_seed, [run], n_boot, 1, {"M": M})


# ---------------------------------------------------------------------------
# predictions vs samples


def _check_grid(run: EpsilonEnsemble, cov_report: CovarianceReport):
    if len(run.times) != len(cov_report.times) or not np.allclose(run.times, cov_report.times, rtol=0, atol=1e-12):
        raise ValueError("ensemble and covariance report use different output times")


def compare_covariance(report: EnsembleReport, cov_report: CovarianceReport, epsilon: float | None = None, factor: float = 3.0) -> dict:
    """Empirical minus predicted covariances, per component pair, coordinate pair and time pair.

    Component covariances use the convention ``G_i(t) = eps^{-1/2} int_0^{t/alpha_i} B_i``
    for linear scales, matching ``CovarianceModel.cov_components``.  A row is
    flagged when the difference exceeds ``factor`` times the bootstrap
    half-width.  Rows for ``G`` itself compare against ``cov_G``.
    """
    run = report.runs[-1] if epsilon is None else report.at(epsilon)
    _check_grid(run, cov_report)
    model = cov_report.model
    T = len(run.times)
    ell, d = run.G_components.shape[2], run.G_components.shape[3]
    comp = run.stats["components"]
    C = comp["cov"].reshape(T, ell, d, T, ell, d)
    lo = comp["ci_lo"].reshape(C.shape)
    hi = comp["ci_hi"].reshape(C.shape)
    rows = []

    def add(kind, i, j, l, m, a, b, emp, clo, chi, pred):
        half = 0.5 * (chi - clo)
        diff = emp - pred
        flagged = bool(abs(diff) > factor * half) if half > 0 else bool(abs(diff) > 1e-12)
        rows.append({"kind": kind, "i": i, "j": j, "l": l, "m": m, "s": float(run.times[a]), "t": float(run.times[b]), "empirical": float(emp), "predicted": float(pred), "difference": float(diff), "ci_lo": float(clo), "ci_hi": float(chi), "flagged": flagged})

    for i in range(1, ell + 1):
        for j in range(1, ell + 1):
            for a in range(T):
                for b in range(T):
                    pred = model.cov_components(i, j, run.times[a], run.times[b]) if model is not None else np.zeros((d, d))
                    for l in range(d):
                        for m in range(d):
                            add("component", i, j, l, m, a, b, C[a, i - 1, l, b, j - 1, m], lo[a, i - 1, l, b, j - 1, m], hi[a, i - 1, l, b, j - 1, m], pred[l, m])
    flatG = run.G.reshape(run.M, -1)
    covG, loG, hiG = bootstrap_cov(flatG, report.n_boot, derive_seed(report.base_seed, 2_000_003))
    covG = covG.reshape(T, d, T, d)
    loG = loG.reshape(covG.shape)
    hiG = hiG.reshape(covG.shape)
    for a in range(T):
        for b in range(T):
            for l in range(d):
                for m in range(d):
                    add("G", 0, 0, l, m, a, b, covG[a, l, b, m], loG[a, l, b, m], hiG[a, l, b, m], cov_report.cov_G[a, b, l, m])
    n_flag = sum(r["flagged"] for r in rows)
    return {
        "epsilon": run.epsilon,
        "rows": rows,
        "pass_rate": 1.0 - n_flag / max(len(rows), 1),
        "n_flagged": n_flag,
        "convention": "G_i(t) = eps^(-1/2) * int_0^(t/alpha_i) B_i for i <= k; Cov = int_0^min(s,t) D_ij(Zbar(r/alpha_i), Zbar(r/alpha_j)) dr",
        "factor": factor,
    }


def vanishing_trend(report: EnsembleReport, i: int, t_index: int = -1, component: int = 0, time_kind: str = "continuous") -> dict:
    """Decay of ``Var G_i^eps(t)`` along the eps grid for a superlinear index ``i``.

    Passes when the variance decreases strictly as eps decreases and the
    final value is below three times its bootstrap CI width (or when all
    values are exactly zero).  The log-log slope is reported as well.
    """
    if len(report.runs) < 3:
        raise ValueError("need at least three eps values")
    runs = sorted(report.runs, key=lambda r: -r.epsilon)
    eps = np.array([r.epsilon for r in runs])
    var = []
    width = []
    for r in runs:
        X = r.G_components[:, t_index, i - 1, component][:, None]
        v, lo, hi = bootstrap_cov(X, report.n_boot, derive_seed(report.base_seed, 3_000_017, i, int(np.round(-np.log10(r.epsilon) * 1000))))
        var.append(float(v[0, 0]))
        width.append(float(hi[0, 0] - lo[0, 0]))
    var = np.array(var)
    width = np.array(width)
    if np.all(var == 0):
        return {"eps": eps.tolist(), "variance": var.tolist(), "ci_width": width.tolist(), "slope": np.nan, "decreasing": True, "final_small": True, "passed": True, "time_kind": time_kind, "note": "identically zero"}
    decreasing = bool(np.all(np.diff(var) < 0))
    final_small = bool(var[-1] < 3.0 * width[-1])
    pos = var > 0
    slope = float(np.polyfit(np.log(eps[pos]), np.log(var[pos]), 1)[0]) if pos.sum() >= 2 else np.nan
    return {"eps": eps.tolist(), "variance": var.tolist(), "ci_width": width.tolist(), "slope": slope, "decreasing": decreasing, "final_small": final_small, "passed": decreasing and final_small, "time_kind": time_kind}


def cross_covariance_trend(report: EnsembleReport, i: int, j: int, t_index: int = -1) -> dict:
    """``|Cov(G_i(t), G_j(t))|`` across the eps grid with its CI half-width (for ``i > k``, ``j < i``)."""
    runs = sorted(report.runs, key=lambda r: -r.epsilon)
    vals, halves = [], []
    for r in runs:
        comp = r.stats["components"]
        T = len(r.times)
        ell, d = r.G_components.shape[2:]
        C = comp["cov"].reshape(T, ell, d, T, ell, d)
        lo = comp["ci_lo"].reshape(C.shape)
        hi = comp["ci_hi"].reshape(C.shape)
        vals.append(abs(float(C[t_index, i - 1, 0, t_index, j - 1, 0])))
        halves.append(0.5 * float(hi[t_index, i - 1, 0, t_index, j - 1, 0] - lo[t_index, i - 1, 0, t_index, j - 1, 0]))
    vals = np.array(vals)
    halves = np.array(halves)
    # monotone within CI: each value below its predecessor plus both half-widths
    monotone = bool(np.all(vals[1:] <= vals[:-1] + halves[1:] + halves[:-1]))
    return {"eps": [r.epsilon for r in runs], "abs_cov": vals.tolist(), "half_width": halves.tolist(), "monotone_within_ci": monotone}


def q_consistency(report: EnsembleReport, scenario: Scenario, n_paths: int | None = None) -> dict:
    """Residual between ``Q^eps`` and the limit equation applied to ``G^eps``, per eps.

    ``G`` is interpolated linearly between output times, so the output grid
    should be fine for the residual to reflect eps rather than interpolation.
    """
    out = {}
    dec = scenario.decomposed
    for r in report.runs:
        if r.Q is None:
            continue
        n = r.M if n_paths is None else min(n_paths, r.M)
        res = 0.0
        for m in range(n):
            sol = solve_limit_ode((r.times, r.G[m]), dec.bar_B_gradient, scenario.zbar, tol=1e-9)
            res = max(res, float(np.max(np.abs(sol.H - r.Q[m]))))
        out[r.epsilon] = res
    return out


# ---------------------------------------------------------------------------
# Gaussianity


def holm(pvalues: Sequence[float], alpha: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Holm step-down adjusted p-values and rejection flags."""
    p = np.asarray(pvalues, dtype=float)
    n = len(p)
    if n == 0:
        return p, np.zeros(0, dtype=bool)
    order = np.argsort(p)
    adj = np.empty(n)
    adj[order] = np.minimum(1.0, np.maximum.accumulate((n - np.arange(n)) * p[order]))
    return adj, adj <= alpha


def _mardia(X: np.ndarray) -> dict:
    M, p = X.shape
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / M
    Sinv = np.linalg.pinv(S)
    G = Xc @ Sinv @ Xc.T
    b1 = float((G**3).sum() / M**2)
    b2 = float(np.mean(np.diag(G) ** 2))
    skew_stat = M * b1 / 6.0
    dof = p * (p + 1) * (p + 2) / 6.0
    kurt_z = (b2 - p * (p + 2)) / np.sqrt(8.0 * p * (p + 2) / M)
    return {
        "b1": b1,
        "b2": b2,
        "skew_p": float(stats.chi2.sf(skew_stat, dof)),
        "kurt_z": float(kurt_z),
        "kurt_p": float(2 * stats.norm.sf(abs(kurt_z))),
    }


def _pick_times(times: np.ndarray, var: np.ndarray, n: int = 3) -> list[int]:
    usable = [k for k in range(len(times)) if var[k] > 0]
    if len(usable) <= n:
        return usable
    pos = np.linspace(0, len(usable) - 1, n).round().astype(int)
    return [usable[k] for k in pos]


def normality_tests(report: EnsembleReport, cov_report: CovarianceReport | None, epsilon: float | None = None, alpha: float = 0.01, quantity: str = "G") -> dict:
    """Marginal and joint Gaussianity checks of ``G^eps`` (or ``Q^eps``).

    Per output time and coordinate: skewness and kurtosis tests with their
    z-scores, and the Kolmogorov-Smirnov distance of the sample divided by
    the predicted standard deviation.  Jointly across up to three times:
    Mardia's skewness and kurtosis.  All p-values go through Holm's
    correction at level ``alpha``.  When the predicted variance is zero or
    unavailable the sample is standardized by its own moments instead.
    """
    run = report.runs[-1] if epsilon is None else report.at(epsilon)
    if run.M < 500:
        raise ValueError("normality tests need M >= 500")
    X = run.G if quantity == "G" else run.Q
    if X is None:
        raise ValueError(f"no {quantity} samples in the ensemble")
    if cov_report is not None:
        _check_grid(run, cov_report)
    T, d = X.shape[1], X.shape[2]
    rows = []
    pvals = []
    for ti in range(T):
        for l in range(d):
            x = X[:, ti, l]
            if np.ptp(x) == 0:
                continue
            pred_var = None
            if cov_report is not None:
                pv = cov_report.var_G[ti, l, l] if quantity == "G" else (None if cov_report.cov_Q is None else cov_report.cov_Q[ti, ti, l, l])
                pred_var = None if pv is None else float(pv)
            if pred_var is not None and pred_var > 1e-12:
                z = x / np.sqrt(pred_var)
                standardization = "predicted"
            else:
                z = (x - x.mean()) / x.std(ddof=1)
                standardization = "empirical"
            sk = stats.skewtest(x)
            ku = stats.kurtosistest(x)
            ks = stats.kstest(z, "norm")
            rows.append({
                "t": float(run.times[ti]), "l": l, "standardization": standardization,
                "skew_z": float(sk.statistic), "skew_p": float(sk.pvalue),
                "kurt_z": float(ku.statistic), "kurt_p": float(ku.pvalue),
                "ks_distance": float(ks.statistic), "ks_p": float(ks.pvalue),
            })
            pvals += [sk.pvalue, ku.pvalue, ks.pvalue]
    var = X.var(axis=0)[:, 0]
    pick = _pick_times(run.times, var)
    mardia = None
    if len(pick) >= 2 or (len(pick) == 1 and d > 1):
        Y = X[:, pick, :].reshape(run.M, -1)
        mardia = _mardia(Y)
        mardia["times"] = [float(run.times[k]) for k in pick]
        pvals += [mardia["skew_p"], mardia["kurt_p"]]
    adj, reject = holm(pvals, alpha)
    k = 0
    for row in rows:
        row["skew_p_adj"], row["kurt_p_adj"], row["ks_p_adj"] = (float(v) for v in adj[k:k + 3])
        row["rejected"] = bool(reject[k:k + 3].any())
        k += 3
    if mardia is not None:
        mardia["skew_p_adj"], mardia["kurt_p_adj"] = float(adj[k]), float(adj[k + 1])
        mardia["rejected"] = bool(reject[k:k + 2].any())
    return {"epsilon": run.epsilon, "quantity": quantity, "rows": rows, "mardia": mardia, "alpha": alpha, "passed": not bool(reject.any())}
