"""Command-line front end: ``nonconvavg run|oscillator|torus|report|list-scenarios|validate``.

Exit codes: 0 success, 2 config parse error, 3 validation failure, 4 runtime
failure.  Statistical verdicts are written to the results but never change
the exit code.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig, build_family, build_field_from, build_process, gallery, resolve_config
from .covariance import CovarianceError, CovarianceModel, covariance_report
from .fast_process import ProcessError
from .field import FieldError, validate_field
from .mixing import check_assumption, coefficient_table
from .montecarlo import THREADS_ENV, compare_covariance, normality_tests, run_ensemble, vanishing_trend
from .oscillator import OscillatorError, OscillatorSystem, build_forcing, plug_back_residual, run_oscillator
from .scenario import Scenario
from .time_scales import GrowthConditionError, validate_growth
from .torus import TorusError, build_torus_field, run_torus

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

GAMMA_GRID = (0.5, 1.0, 2.0)
GROWTH_HORIZON = 1e6


class ValidationFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers


def fmt(v) -> str:
    """CSV cell: floats with 17 significant digits, booleans lower case."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.17g}"
    return str(v)


def write_csv(path: Path, header: list, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            cells = [r.get(h) for h in header] if isinstance(r, dict) else list(r)
            w.writerow([fmt(c) for c in cells])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=False) + "\n")
    return path


def eps_tag(eps: float) -> str:
    return f"eps_{eps:.0e}".replace("+", "")


def _series_filename(series) -> str:
    parts = [series.kind] + [f"{k}{v:g}" for k, v in sorted(series.params.items())]
    return "_".join(parts).replace(".", "p") + ".csv"


def _stamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# building and validation


def build_scenario(cfg: ScenarioConfig) -> tuple[Scenario, dict]:
    """Scenario plus the hard validation record; raises ValidationFailure."""
    try:
        process = build_process(cfg.process)
        family = build_family(cfg.scales)
        if cfg.mode == "discrete" and not process.is_discrete:
            raise ValidationFailure("mode 'discrete' needs a discrete-time process")
        if cfg.mode == "continuous" and process.is_discrete:
            raise ValidationFailure("mode 'continuous' needs a continuous-time process")
        spec = build_field_from(cfg, family)
        g = cfg.grid
        scenario = Scenario(cfg.name, process, spec, family, g["T"], g["output_times"], g["x0"], g["track_slow"], g["h"], g["slow_step"])
    except ValidationFailure:
        raise
    except (ProcessError, FieldError, GrowthConditionError, TypeError, ValueError) as exc:
        raise ValidationFailure(str(exc)) from exc
    return scenario, validate_scenario(cfg, scenario)


def validate_scenario(cfg: ScenarioConfig, scenario: Scenario) -> dict:
    # the growth condition is asymptotic; short runs still get a long check horizon
    horizon = max(cfg.grid["T"] / min(cfg.eps), GROWTH_HORIZON)
    try:
        growth = validate_growth(scenario.family, GAMMA_GRID, horizon)
    except GrowthConditionError as exc:
        raise ValidationFailure(f"growth condition on the time scales violated: {exc}") from exc
    if not growth.valid:
        bad = growth.failures()[0]
        raise ValidationFailure(
            f"growth condition on the time scales violated: q_{bad['index']} increments do not diverge (gamma = {bad['gamma']:g})"
        )
    warnings = [f"q_{v['index']} is below q_{v['index'] - 1} up to t = {v['last_violation']:.3g}" for v in growth.ordering_violations]
    fr = validate_field(scenario.field, 200, cfg.base_seed)
    if not fr.passed:
        raise ValidationFailure(f"field regularity bound K = {fr.K:g} exceeded: {fr.ratios}")
    return {"growth": {"valid": growth.valid, "rows": growth.rows}, "field": fr.as_dict(), "warnings": warnings}


def _threads(args) -> int | None:
    return args.threads if getattr(args, "threads", None) else None


def _load(args) -> ScenarioConfig:
    ref = args.config_pos or args.config
    if not ref:
        raise ConfigError("no config given (pass a path or a gallery name)", 0, 0, "<cli>")
    cfg = resolve_config(ref)
    return cfg.with_overrides(seed=args.seed, eps=args.eps)


def _out_dir(args, cfg: ScenarioConfig) -> Path:
    return Path(args.out) if args.out else Path("results") / cfg.name


# ---------------------------------------------------------------------------
# run


def _prediction(scenario: Scenario) -> tuple[object | None, dict]:
    if scenario.process.__class__.__name__ != "FiniteChainSpec":
        return None, {"available": False, "reason": "covariance predictions are implemented for finite chains only"}
    try:
        model = CovarianceModel(scenario.decomposed, scenario.process, scenario.family, scenario.zbar, scenario.T_final)
        rep = covariance_report(model, scenario.output_times, grad_bar_B=scenario.decomposed.bar_B_gradient)
    except CovarianceError as exc:
        return None, {"available": False, "reason": str(exc)}
    info = {
        "available": True,
        "times": rep.times,
        "var_G": rep.var_G,
        "var_Q": None if rep.cov_Q is None else np.einsum("ttlm->tlm", rep.cov_Q),
    }
    return rep, info


def _mixing(cfg: ScenarioConfig, scenario: Scenario, out: Path) -> dict:
    mx = cfg.mixing
    if not mx["enabled"]:
        return {"computed": False}
    table = coefficient_table(scenario.process, n_max=mx["n_max"], p_values=tuple(mx["p"]), q_values=tuple(mx["q"]), kappa=scenario.field.kappa)
    files = []
    for s in table.series:
        files.append(write_csv(out / "coefficients" / _series_filename(s), ["n", "value"], s.rows()).name)
    verdict = check_assumption(table, scenario.field.kappa, scenario.family.ell, scenario.process.dim)
    return {"computed": True, "files": files, "assumption": verdict.as_dict(), "monotone_violations": table.monotone_violations()}


def cmd_run(cfg: ScenarioConfig, out: Path, threads: int | None = None, log=print) -> int:
    if cfg.mode == "oscillator":
        return cmd_oscillator(cfg, out, log=log)
    if cfg.mode == "fully_coupled":
        return cmd_torus(cfg, out, log=log)
    try:
        scenario, validation = build_scenario(cfg)
    except ValidationFailure as exc:
        log(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    t_start = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        cov_rep, pred = _prediction(scenario)
        mixing = _mixing(cfg, scenario, out)
        log(f"[{cfg.name}] M = {cfg.M}, eps = {cfg.eps}")
        report = run_ensemble(scenario, cfg.M, cfg.eps, cfg.base_seed, threads=threads)
        verdicts, ens = _run_verdicts(cfg, scenario, report, cov_rep)
        files = _write_run_files(out, scenario, report, cov_rep, verdicts)
    except Exception as exc:  # runtime failures are reported, not raised
        log(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = {
        "scenario": cfg.name,
        "mode": cfg.mode,
        "version": __version__,
        "created": _stamp(),
        "base_seed": cfg.base_seed,
        "M": cfg.M,
        "eps": cfg.eps,
        "config": cfg.as_dict(),
        "describe": scenario.describe(),
        "validation": validation,
        "prediction": pred,
        "ensembles": ens,
        "verdicts": verdicts,
        "mixing": mixing,
        "files": files,
        "wall_time": time.perf_counter() - t_start,
    }
    write_json(out / "summary.json", summary)
    for line in summary_lines(summary):
        log(line)
    return EXIT_OK


def _run_verdicts(cfg, scenario, report, cov_rep) -> tuple[dict, list]:
    verdicts: dict = {}
    ens = []
    fam = scenario.family
    for r in report.runs:
        e = {"epsilon": r.epsilon, "M": r.M, "times": r.times, "identity_residual": r.identity_residual, "wall_time": r.wall_time}
        e["var_G"] = [[{"value": st["cov"][l, l], "ci_lo": st["ci_lo"][l, l], "ci_hi": st["ci_hi"][l, l]} for l in range(len(st["mean"]))] for st in r.stats["G"]]
        if "Q" in r.stats:
            e["var_Q"] = [[{"value": st["cov"][l, l], "ci_lo": st["ci_lo"][l, l], "ci_hi": st["ci_hi"][l, l]} for l in range(len(st["mean"]))] for st in r.stats["Q"]]
        if r.sup_deviation is not None:
            e["median_sup_deviation"] = float(np.median(r.sup_deviation))
        ens.append(e)
    meds = [e.get("median_sup_deviation") for e in sorted(ens, key=lambda e: -e["epsilon"])]
    if all(m is not None for m in meds):
        verdicts["averaging"] = {"median_sup_deviation": meds, "strictly_decreasing": bool(np.all(np.diff(meds) < 0)) if len(meds) > 1 else None}
    if cov_rep is not None:
        cc = compare_covariance(report, cov_rep)
        verdicts["covariance"] = {k: cc[k] for k in ("epsilon", "pass_rate", "n_flagged", "factor", "convention")}
        verdicts["covariance_rows"] = cc["rows"]
    last = report.runs[-1]
    if last.M >= 500:
        try:
            verdicts["normality"] = normality_tests(report, cov_rep)
        except ValueError as exc:
            verdicts["normality"] = {"skipped": str(exc)}
    else:
        verdicts["normality"] = {"skipped": "needs M >= 500"}
    for i in range(fam.k + 1, fam.ell + 1):
        if scenario.decomposed.is_zero(i):
            continue
        if not scenario.process.is_discrete and len(report.runs) >= 3:
            verdicts.setdefault("vanishing", {})[str(i)] = vanishing_trend(report, i, time_kind=scenario.time_kind)
        if scenario.process.is_discrete and cov_rep is not None:
            T = float(last.times[-1])
            pred = float(cov_rep.model.cov_components(i, i, T, T)[0, 0])
            rows = []
            for r in report.runs:
                v = float(np.var(r.G_components[:, -1, i - 1, 0], ddof=1))
                rows.append({"epsilon": r.epsilon, "empirical": v, "predicted": pred, "relative_error": (v - pred) / pred if pred else None})
            verdicts.setdefault("discrete_extra", {})[str(i)] = {"t": T, "rows": rows, "within_15pct": abs(rows[-1]["relative_error"]) <= 0.15 if pred else None}
    return verdicts, ens


def _write_run_files(out: Path, scenario, report, cov_rep, verdicts) -> list:
    files = []
    header = ["eps", "quantity", "t", "l", "m", "value", "ci_lo", "ci_hi"]
    rows = report.stat_rows()
    for r in report.runs:
        sub = [x for x in rows if x["eps"] == r.epsilon]
        files.append(write_csv(out / f"ensemble_{eps_tag(r.epsilon)}.csv", header, sub).name)
    # per-path summaries
    traj = []
    d = report.runs[0].G.shape[2]
    times = report.runs[0].times
    for r in report.runs:
        for m in range(r.M):
            row = {"eps": r.epsilon, "path": m, "seed": int(r.seeds[m]), "sup_deviation": None if r.sup_deviation is None else float(r.sup_deviation[m])}
            for ti, t in enumerate(times):
                for l in range(d):
                    row[f"G_t{t:g}_{l}"] = float(r.G[m, ti, l])
                    if r.Q is not None:
                        row[f"Q_t{t:g}_{l}"] = float(r.Q[m, ti, l])
            traj.append(row)
    files.append(write_csv(out / "trajectories.csv", list(traj[0].keys()), traj).name)
    if cov_rep is not None:
        pr = []
        for ti, t in enumerate(cov_rep.times):
            for l in range(cov_rep.d):
                pr.append({"t": float(t), "l": l, "var_G": float(cov_rep.var_G[ti, l, l]), "var_Q": None if cov_rep.cov_Q is None else float(cov_rep.cov_Q[ti, ti, l, l])})
        files.append(write_csv(out / "predicted_variance.csv", ["t", "l", "var_G", "var_Q"], pr).name)
        cols = ["kind", "i", "j", "l", "m", "s", "t", "empirical", "predicted", "difference", "ci_lo", "ci_hi", "flagged"]
        files.append(write_csv(out / "covariance_compare.csv", cols, verdicts["covariance_rows"]).name)
    return files


# ---------------------------------------------------------------------------
# oscillator and torus


def _require_mode(cfg: ScenarioConfig, mode: str):
    if cfg.mode != mode:
        raise ConfigError(f"mode is {cfg.mode!r}, this command needs mode = {mode!r}", 1, 1, cfg.source)


def cmd_oscillator(cfg: ScenarioConfig, out: Path, log=print) -> int:
    _require_mode(cfg, "oscillator")
    o = cfg.oscillator
    try:
        process = build_process(cfg.process)
        family = build_family(cfg.scales)
        system = OscillatorSystem(o["lam"], build_forcing(o["forcing"], **o["params"]), process, family, o["r0"], o["phi0"])
    except (OscillatorError, ProcessError, GrowthConditionError, TypeError, ValueError) as exc:
        log(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    try:
        plug = plug_back_residual(system, cfg.base_seed, max(cfg.eps), cfg.grid["T"], h=1e-3)
        ens = run_oscillator(system, cfg.M, cfg.eps, cfg.base_seed, cfg.grid["T"], cfg.grid["output_times"], o["h"])
    except Exception as exc:
        log(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    rows, files, res = [], [], []
    for e in ens:
        for ti, t in enumerate(e.times):
            r = e.states[:, ti, 0]
            rows.append({
                "eps": e.epsilon, "t": float(t), "mean_r": float(r.mean()), "var_r": float(r.var(ddof=1)),
                "mean_phi": float(e.states[:, ti, 1].mean()), "energy_mean": float(e.energy_mean[ti]),
                "energy_ci_lo": float(e.energy_ci[ti, 0]), "energy_ci_hi": float(e.energy_ci[ti, 1]),
                "energy_averaged": float(e.energy_averaged[ti]), "r_averaged": float(e.averaged[ti, 0]), "phi_averaged": float(e.averaged[ti, 1]),
            })
        res.append({"epsilon": e.epsilon, "energy_within_ci": e.energy_within_ci, "median_sup_deviation": float(np.median(e.sup_deviation)), "h": e.meta["h"]})
    files.append(write_csv(out / "oscillator.csv", list(rows[0].keys()), rows).name)
    summary = {
        "scenario": cfg.name, "mode": cfg.mode, "version": __version__, "created": _stamp(),
        "base_seed": cfg.base_seed, "M": cfg.M, "eps": cfg.eps, "config": cfg.as_dict(),
        "plug_back": plug, "ensembles": res, "files": files, "wall_time": time.perf_counter() - t_start,
    }
    write_json(out / "summary.json", summary)
    for line in summary_lines(summary):
        log(line)
    return EXIT_OK


def cmd_torus(cfg: ScenarioConfig, out: Path, log=print) -> int:
    _require_mode(cfg, "fully_coupled")
    t = cfg.torus
    try:
        fld = build_torus_field(t["field"], t["n"], t["terms"])
    except TorusError as exc:
        log(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()
    try:
        res = run_torus(fld, cfg.eps, t["points"], t["a_box"], cfg.grid["T"], cfg.base_seed, t["steps_per_period"], t["resonance_tol"])
    except Exception as exc:
        log(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    files = [write_csv(out / "torus_errors.csv", ["eps", "error", "error_all_points"], list(zip(res.epsilons, res.errors, res.errors_all))).name]
    n = fld.n
    prow = []
    for p in range(len(res.points)):
        row = {f"a{j}": res.points[p, j] for j in range(n)}
        row.update({f"phi{j}": res.points[p, n + j] for j in range(n)})
        row["resonant"] = bool(res.resonant[p])
        for e_idx, eps in enumerate(res.epsilons):
            row[f"sup_{eps_tag(eps)}"] = res.per_point[e_idx, p]
        prow.append(row)
    files.append(write_csv(out / "torus_points.csv", list(prow[0].keys()), prow).name)
    summary = {
        "scenario": cfg.name, "mode": cfg.mode, "version": __version__, "created": _stamp(),
        "base_seed": cfg.base_seed, "eps": cfg.eps, "config": cfg.as_dict(),
        "torus": {"errors": res.errors, "errors_all_points": res.errors_all, "strictly_decreasing": res.strictly_decreasing,
                  "n_resonant": int(res.resonant.sum()), "locked_modes": res.locked_modes},
        "files": files, "wall_time": time.perf_counter() - t_start,
    }
    if res.locked_modes:
        summary["torus"]["warning"] = "field has modes that stay constant along trajectories; the averaged equation misses them"
    write_json(out / "summary.json", summary)
    for line in summary_lines(summary):
        log(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def load_summary(path: Path) -> dict:
    path = Path(path)
    f = path / "summary.json"
    if not path.is_dir():
        raise FileNotFoundError(f"{path} is not a results directory")
    if not f.is_file():
        raise FileNotFoundError(f"{path} has no summary.json")
    try:
        return json.loads(f.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{f} is corrupt: {exc}") from exc


def summary_lines(s: dict) -> list[str]:
    """Human-readable lines for one summary."""
    lines = [f"== {s['scenario']} ({s['mode']}), base_seed {s['base_seed']}"]
    if s["mode"] in ("continuous", "discrete"):
        pred = s["prediction"]
        last = s["ensembles"][-1]
        times = last["times"]
        for ti, t in enumerate(times):
            emp = last["var_G"][ti][0]
            half = 0.5 * (emp["ci_hi"] - emp["ci_lo"])
            p = f"{pred['var_G'][ti][0][0]:.4f}" if pred.get("available") else "n/a"
            lines.append(f"Var G({t:g}): predicted {p}, empirical {emp['value']:.4g}±{half:.2g} (eps = {last['epsilon']:g})")
        if pred.get("available") and pred.get("var_Q") is not None and "var_Q" in last:
            for ti, t in enumerate(times):
                emp = last["var_Q"][ti][0]
                half = 0.5 * (emp["ci_hi"] - emp["ci_lo"])
                lines.append(f"Var Q({t:g}): predicted {pred['var_Q'][ti][0][0]:.4f}, empirical {emp['value']:.4g}±{half:.2g}")
        v = s["verdicts"]
        if "averaging" in v:
            meds = ", ".join(f"{m:.4g}" for m in v["averaging"]["median_sup_deviation"])
            lines.append(f"median sup|Z - Zbar| over eps: {meds} (strictly decreasing: {v['averaging']['strictly_decreasing']})")
        if "covariance" in v:
            lines.append(f"covariance rows within 3 half-widths: {v['covariance']['pass_rate']:.3f} ({v['covariance']['n_flagged']} flagged)")
        nt = v.get("normality", {})
        lines.append("normality: " + (f"skipped ({nt['skipped']})" if "skipped" in nt else ("passed" if nt.get("passed") else "rejected")))
        for i, vt in v.get("vanishing", {}).items():
            lines.append(f"Var G_{i}(T) over eps: {', '.join(f'{x:.3g}' for x in vt['variance'])} (passed: {vt['passed']})")
        for i, de in v.get("discrete_extra", {}).items():
            r = de["rows"][-1]
            lines.append(f"Var G_{i}({de['t']:g}): predicted {r['predicted']:.4f}, empirical {r['empirical']:.4f} (within 15%: {de['within_15pct']})")
        mx = s.get("mixing", {})
        if mx.get("computed"):
            lines.append(f"mixing assumption: {mx['assumption']['verdict']}")
    elif s["mode"] == "oscillator":
        pb = s["plug_back"]
        lines.append(f"plug-back residual: position {pb['position_residual']:.2e}, velocity {pb['velocity_residual']:.2e}")
        for e in s["ensembles"]:
            lines.append(f"eps = {e['epsilon']:g}: energy within CI of averaged prediction: {e['energy_within_ci']}, median sup deviation {e['median_sup_deviation']:.4g}")
    elif s["mode"] == "fully_coupled":
        tr = s["torus"]
        lines.append("in-measure error over eps: " + ", ".join(f"{x:.4g}" for x in tr["errors"]) + f" (strictly decreasing: {tr['strictly_decreasing']})")
        if tr.get("warning"):
            lines.append("warning: " + tr["warning"])
    return lines


def _trend_rows(s: dict) -> list[tuple[float, str, float]]:
    rows = []
    if s["mode"] in ("continuous", "discrete"):
        for e in s["ensembles"]:
            rows.append((e["epsilon"], "var_G(T)", e["var_G"][-1][0]["value"]))
            if "median_sup_deviation" in e:
                rows.append((e["epsilon"], "median_sup", e["median_sup_deviation"]))
    elif s["mode"] == "oscillator":
        for e in s["ensembles"]:
            rows.append((e["epsilon"], "median_sup", e["median_sup_deviation"]))
    else:
        for eps, err in zip(s["eps"], s["torus"]["errors"]):
            rows.append((eps, "error", err))
    return rows


def _coefficient_tables(path: Path, n_show: int = 8) -> list[str]:
    lines = []
    cdir = path / "coefficients"
    if not cdir.is_dir():
        return lines
    files = sorted(cdir.glob("*.csv"))
    if not files:
        return lines
    cols = []
    for f in files:
        with open(f) as fh:
            rd = list(csv.reader(fh))[1:]
        cols.append((f.stem, [float(r[1]) for r in rd[:n_show]]))
    width = max(12, max(len(c[0]) for c in cols) + 2)
    lines.append("coefficient decay:")
    lines.append("n".rjust(4) + "".join(c[0].rjust(width) for c in cols))
    for n in range(n_show):
        lines.append(str(n).rjust(4) + "".join((f"{c[1][n]:.4g}" if n < len(c[1]) else "").rjust(width) for c in cols))
    return lines


def cmd_report(paths, out: Path | None = None, log=print) -> int:
    if not paths:
        log("report: no results directories given", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        summaries = [load_summary(p) for p in paths]
    except (FileNotFoundError, ValueError) as exc:
        log(f"report: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for p, s in zip(paths, summaries):
        for line in summary_lines(s):
            log(line)
        for line in _coefficient_tables(Path(p)):
            log(line)
    # side-by-side eps trend
    labels = [f"{s['scenario']}@{Path(p).name}" for p, s in zip(paths, summaries)]
    table: dict = {}
    for lab, s in zip(labels, summaries):
        for eps, q, v in _trend_rows(s):
            table.setdefault((q, eps), {})[lab] = v
    width = max(14, max(len(lab) for lab in labels) + 2)
    log("eps trend:")
    log("quantity".ljust(12) + "eps".rjust(10) + "".join(lab.rjust(width) for lab in labels))
    rows = []
    for (q, eps) in sorted(table, key=lambda k: (k[0], -k[1])):
        vals = table[(q, eps)]
        log(q.ljust(12) + f"{eps:10.0e}" + "".join((f"{vals[lab]:.4g}" if lab in vals else "-").rjust(width) for lab in labels))
        rows.append([q, eps] + [vals.get(lab) for lab in labels])
    if out is not None:
        write_csv(Path(out) / "trend.csv", ["quantity", "eps"] + labels, rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _print(*args, file=None, **kw):
    print(*args, file=file or sys.stdout, **kw)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nonconvavg", description="Simulate and check averaging and fluctuation limits for multi-scale slow/fast systems.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, with_run=True):
        p.add_argument("config_pos", nargs="?", metavar="CONFIG", help="config file or gallery scenario name")
        p.add_argument("--config", help="config file or gallery scenario name")
        if with_run:
            p.add_argument("--out", help="results directory (default results/<name>)")
            p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or CPU count)")
        p.add_argument("--seed", type=int, help="override base_seed")
        p.add_argument("--eps", type=float, nargs="+", help="override the eps list")

    common(sub.add_parser("run", help="simulate, predict and compare"))
    common(sub.add_parser("oscillator", help="randomly forced oscillator in polar variables"))
    common(sub.add_parser("torus", help="fully coupled averaging on the torus"))
    common(sub.add_parser("validate", help="parse and validate a config without simulating"), with_run=False)
    rp = sub.add_parser("report", help="summarize one or more results directories")
    rp.add_argument("results", nargs="*", help="results directories")
    rp.add_argument("--out", help="directory for trend.csv")
    sub.add_parser("list-scenarios", help="list the shipped scenarios")
    return ap


def main(argv=None, log=_print) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-scenarios":
        for name, desc in gallery().items():
            log(f"{name:24s}{desc}")
        return EXIT_OK
    if args.command == "report":
        return cmd_report(args.results, args.out, log=log)
    try:
        cfg = _load(args)
        if args.command == "validate":
            if cfg.mode in ("continuous", "discrete"):
                _, val = build_scenario(cfg)
                for w in val["warnings"]:
                    log(f"warning: {w}")
            log(f"{cfg.name}: valid")
            return EXIT_OK
        out = _out_dir(args, cfg)
        if args.command == "oscillator":
            return cmd_oscillator(cfg, out, log=log)
        if args.command == "torus":
            return cmd_torus(cfg, out, log=log)
        return cmd_run(cfg, out, threads=_threads(args), log=log)
    except ConfigError as exc:
        log(f"config error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationFailure as exc:
        log(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
