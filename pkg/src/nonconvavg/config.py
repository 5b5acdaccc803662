"""Scenario configuration files.

Configs are TOML documents: top-level keys plus the tables ``[process]``,
``[scales]``, ``[field]``, ``[grid]`` and, depending on ``mode``,
``[oscillator]`` or ``[torus]``.  Only literal values are read; nothing in
a config is executed.  The grammar is documented in ``docs/config.md``.

Parse and structure problems raise :class:`ConfigError` carrying a line
and column.  Semantic problems (rates not increasing, dimension mismatch)
surface later as validation errors from the modules that own them.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from .fast_process import DyadicMapSpec, FiniteChainSpec
from .field import FieldSpec, build_field
from .time_scales import FastScale, TimeScaleFamily

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "load_config",
    "parse_config",
    "gallery",
    "gallery_path",
    "resolve_config",
    "build_process",
    "build_family",
    "DYADIC_OBSERVABLES",
]

MODES = ("continuous", "discrete", "fully_coupled", "oscillator")

# observable name -> (function, Hoelder exponent, Hoelder constant)
DYADIC_OBSERVABLES = {
    "identity": (lambda x: x, 1.0, 1.0),
    "centered": (lambda x: x - 0.5, 1.0, 1.0),
    "cos": (lambda x: np.cos(2 * np.pi * x), 1.0, 2 * np.pi),
    "sqrt": (lambda x: np.sqrt(x), 0.5, 1.0),
}


class ConfigError(ValueError):
    """Malformed config; ``line`` and ``column`` are 1-based (0 when unknown)."""

    def __init__(self, message: str, line: int = 0, column: int = 0, source: str = "<config>"):
        self.line = line
        self.column = column
        self.source = source
        self.bare = message
        super().__init__(f"{source}:{line}:{column}: {message}")


_TOML_POS = re.compile(r"\(at line (\d+), column (\d+)\)")


class _Locator:
    """Maps table names and keys back to positions in the source text."""

    def __init__(self, text: str, source: str):
        self.lines = text.splitlines()
        self.source = source

    def table(self, name: str) -> tuple[int, int]:
        pat = re.compile(r"^\s*\[\s*" + re.escape(name) + r"\s*\]")
        for i, ln in enumerate(self.lines):
            if pat.match(ln):
                return i + 1, ln.index("[") + 1
        return 0, 0

    def key(self, table: str | None, key: str) -> tuple[int, int]:
        start, _ = self.table(table) if table else (0, 0)
        if table and start == 0:
            return 0, 0
        pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
        # ``start`` is the 1-based header line, i.e. the 0-based index of the first body line
        for i in range(start, len(self.lines)):
            ln = self.lines[i]
            if re.match(r"^\s*\[", ln):
                break
            if pat.match(ln):
                return i + 1, ln.index(key) + 1
        return max(start, 1), 1

    def missing(self, table: str | None, key: str) -> ConfigError:
        if table is None:
            return ConfigError(f"missing required key {key!r}", 1, 1, self.source)
        line, col = self.table(table)
        if line == 0:
            return ConfigError(f"missing required table [{table}] (needed for key {key!r})", len(self.lines) + 1, 1, self.source)
        return ConfigError(f"missing required key {key!r} in [{table}]", line, col, self.source)

    def bad(self, table: str | None, key: str, why: str) -> ConfigError:
        line, col = self.key(table, key)
        where = f"[{table}].{key}" if table else key
        return ConfigError(f"{where}: {why}", line, col, self.source)


@dataclass
class ScenarioConfig:
    """Validated contents of one config file (structure only)."""

    name: str
    mode: str
    base_seed: int
    M: int
    eps: list
    process: dict
    scales: dict
    field: dict
    grid: dict
    mixing: dict = field(default_factory=dict)
    oscillator: dict = field(default_factory=dict)
    torus: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    description: str = ""
    source: str = "<config>"
    raw: dict = field(default_factory=dict, repr=False)

    def with_overrides(self, seed: int | None = None, eps: list | None = None) -> "ScenarioConfig":
        out = ScenarioConfig(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        if seed is not None:
            out.base_seed = int(seed)
        if eps is not None:
            out.eps = [float(e) for e in eps]
        return out

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("name", "mode", "base_seed", "M", "eps", "process", "scales", "field", "grid", "mixing", "oscillator", "torus", "checks", "description")}


def _get(loc: _Locator, tbl: dict, table: str | None, key: str, kind, default: Any = ...):
    if key not in tbl:
        if default is ...:
            raise loc.missing(table, key)
        return default
    val = tbl[key]
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "bool": lambda v: isinstance(v, bool),
        "list": lambda v: isinstance(v, list),
        "table": lambda v: isinstance(v, dict),
    }[kind]
    if not ok(val):
        raise loc.bad(table, key, f"expected {kind}, got {type(val).__name__}")
    return float(val) if kind == "float" else val


def _number_list(loc, tbl, table, key, default=..., allow_str=False):
    vals = _get(loc, tbl, table, key, "list", default)
    if vals is default and default is not ...:
        return vals
    for v in vals:
        good = isinstance(v, (int, float)) and not isinstance(v, bool)
        if allow_str and isinstance(v, str):
            good = bool(re.fullmatch(r"\s*\d+(\s*/\s*\d+)?\s*", v))
        if not good:
            extra = " or fractions like '3/2'" if allow_str else ""
            raise loc.bad(table, key, f"entries must be numbers{extra}, got {v!r}")
    return vals


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = _TOML_POS.search(str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (0, 0)
        msg = _TOML_POS.sub("", str(exc)).strip()
        raise ConfigError(f"syntax error: {msg}", line, col, source) from exc
    loc = _Locator(text, source)

    name = _get(loc, raw, None, "name", "str")
    mode = _get(loc, raw, None, "mode", "str", "continuous")
    if mode not in MODES:
        raise loc.bad(None, "mode", f"must be one of {', '.join(MODES)}")
    base_seed = _get(loc, raw, None, "base_seed", "int", 0)
    M = _get(loc, raw, None, "M", "int", 200)
    if M < 2 and mode != "fully_coupled":
        raise loc.bad(None, "M", "ensemble size must be at least 2")
    description = _get(loc, raw, None, "description", "str", "")

    grid = _get(loc, raw, None, "grid", "table") if "grid" in raw else {}
    eps = _number_list(loc, grid, "grid", "eps")
    if not eps or any(not 0 < e < 1 for e in eps):
        raise loc.bad("grid", "eps", "need a non-empty list of values in (0, 1)")
    T = _get(loc, grid, "grid", "T", "float", 1.0)
    if not T > 0:
        raise loc.bad("grid", "T", "must be positive")
    g = {
        "T": T,
        "output_times": [float(v) for v in _number_list(loc, grid, "grid", "output_times", [0.5, 1.0])],
        "h": _get(loc, grid, "grid", "h", "float", None),
        "slow_step": _get(loc, grid, "grid", "slow_step", "float", 1e-2),
        "x0": [float(v) for v in _number_list(loc, grid, "grid", "x0", [1.0])],
        "track_slow": _get(loc, grid, "grid", "track_slow", "bool", True),
    }
    if any(not 0 <= t <= T for t in g["output_times"]):
        raise loc.bad("grid", "output_times", f"times must lie in [0, {T}]")

    process, scales, fld = {}, {}, {}
    osc, tor = {}, {}
    if mode in ("continuous", "discrete", "oscillator"):
        process = _parse_process(loc, raw, mode)
        scales = _parse_scales(loc, raw)
    if mode in ("continuous", "discrete"):
        tbl = _get(loc, raw, None, "field", "table") if "field" in raw else None
        if tbl is None:
            raise loc.missing("field", "name")
        fld = {"name": _get(loc, tbl, "field", "name", "str"), "params": _get(loc, tbl, "field", "params", "table", {})}
    if mode == "oscillator":
        tbl = raw.get("oscillator")
        if not isinstance(tbl, dict):
            raise loc.missing("oscillator", "lam")
        osc = {
            "lam": _get(loc, tbl, "oscillator", "lam", "float"),
            "forcing": _get(loc, tbl, "oscillator", "forcing", "str"),
            "params": _get(loc, tbl, "oscillator", "params", "table", {}),
            "r0": _get(loc, tbl, "oscillator", "r0", "float", 1.0),
            "phi0": _get(loc, tbl, "oscillator", "phi0", "float", 0.0),
            "h": _get(loc, tbl, "oscillator", "h", "float", 0.05),
        }
    if mode == "fully_coupled":
        tbl = raw.get("torus")
        if not isinstance(tbl, dict):
            raise loc.missing("torus", "field")
        tor = {
            "field": _get(loc, tbl, "torus", "field", "str", "default"),
            "n": _get(loc, tbl, "torus", "n", "int", 1),
            "points": _get(loc, tbl, "torus", "points", "int", 64),
            "a_box": [float(v) for v in _number_list(loc, tbl, "torus", "a_box", [0.5, 1.5])],
            "resonance_tol": _get(loc, tbl, "torus", "resonance_tol", "float", 0.05),
            "steps_per_period": _get(loc, tbl, "torus", "steps_per_period", "int", 20),
            "terms": _get(loc, tbl, "torus", "terms", "list", None),
        }
        if len(tor["a_box"]) != 2 or not tor["a_box"][0] < tor["a_box"][1]:
            raise loc.bad("torus", "a_box", "expected [low, high] with low < high")
    mixing = raw.get("mixing", {})
    if not isinstance(mixing, dict):
        raise loc.bad(None, "mixing", "expected a table")
    mx = {
        "n_max": _get(loc, mixing, "mixing", "n_max", "int", 30),
        "p": [float(v) for v in _number_list(loc, mixing, "mixing", "p", [4, 8, 16])],
        "q": [float(v) for v in _number_list(loc, mixing, "mixing", "q", [2, 4])],
        "enabled": _get(loc, mixing, "mixing", "enabled", "bool", mode in ("continuous", "discrete")),
    }
    checks = raw.get("checks", {})
    if not isinstance(checks, dict):
        raise loc.bad(None, "checks", "expected a table")
    known = {"name", "mode", "base_seed", "M", "description", "grid", "process", "scales", "field", "oscillator", "torus", "mixing", "checks"}
    for key in raw:
        if key not in known:
            raise loc.bad(None, key, "unknown key")
    return ScenarioConfig(name, mode, base_seed, M, [float(e) for e in eps], process, scales, fld, g, mx, osc, tor, dict(checks), description, source, raw)


def _parse_process(loc: _Locator, raw: dict, mode: str) -> dict:
    if "process" not in raw:
        raise loc.missing("process", "kind")
    tbl = _get(loc, raw, None, "process", "table")
    kind = _get(loc, tbl, "process", "kind", "str")
    if kind == "chain":
        time_kind = _get(loc, tbl, "process", "time", "str", "discrete" if mode == "discrete" else "continuous")
        if time_kind not in ("continuous", "discrete"):
            raise loc.bad("process", "time", "must be 'continuous' or 'discrete'")
        gen = _get(loc, tbl, "process", "generator", "list")
        if not gen or not all(isinstance(r, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in r) for r in gen):
            raise loc.bad("process", "generator", "expected a matrix of numbers")
        values = _get(loc, tbl, "process", "values", "list")
        n = len(gen)
        initial = _number_list(loc, tbl, "process", "initial", [1.0] + [0.0] * (n - 1))
        return {"kind": "chain", "time": time_kind, "generator": gen, "values": values, "initial": initial}
    if kind == "dyadic":
        obs = _get(loc, tbl, "process", "observable", "str", "centered")
        if obs not in DYADIC_OBSERVABLES:
            raise loc.bad("process", "observable", f"choose from {sorted(DYADIC_OBSERVABLES)}")
        return {"kind": "dyadic", "time": "discrete", "observable": obs, "quadrature_nodes": _get(loc, tbl, "process", "quadrature_nodes", "int", 4096)}
    raise loc.bad("process", "kind", "must be 'chain' or 'dyadic'")


def _parse_scales(loc: _Locator, raw: dict) -> dict:
    if "scales" not in raw:
        raise loc.missing("scales", "alpha")
    tbl = _get(loc, raw, None, "scales", "table")
    alpha = _number_list(loc, tbl, "scales", "alpha", allow_str=True)
    if not alpha:
        raise loc.bad("scales", "alpha", "need at least one linear rate")
    fast = _get(loc, tbl, "scales", "fast", "list", [])
    for f in fast:
        if not isinstance(f, dict) or "kind" not in f:
            raise loc.bad("scales", "fast", "each entry must be an inline table with a 'kind'")
    return {"alpha": alpha, "fast": fast}


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", 0, 0, str(path)) from exc
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# gallery


def _gallery_dir():
    return resources.files("nonconvavg") / "scenarios"


def gallery() -> dict:
    """Shipped scenario names and their descriptions."""
    out = {}
    for entry in sorted(_gallery_dir().iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".toml"):
            cfg = parse_config(entry.read_text(), entry.name)
            out[cfg.name] = cfg.description
    return out


def gallery_path(name: str):
    p = _gallery_dir() / f"{name}.toml"
    if not p.is_file():
        raise ConfigError(f"no config file and no gallery scenario named {name!r}", 0, 0, name)
    return p


def resolve_config(ref: str) -> ScenarioConfig:
    """``ref`` is a path to a config file or the name of a gallery scenario."""
    p = Path(ref)
    if p.is_file():
        return load_config(p)
    gp = gallery_path(ref)
    return parse_config(gp.read_text(), f"{ref}.toml")


# ---------------------------------------------------------------------------
# builders


def build_process(proc: dict):
    if proc["kind"] == "chain":
        values = proc["values"]
        return FiniteChainSpec(np.array(proc["generator"], dtype=float), np.array(values, dtype=float), np.array(proc["initial"], dtype=float), proc["time"])
    fn, expo, const = DYADIC_OBSERVABLES[proc["observable"]]
    return DyadicMapSpec(fn, holder_exponent=expo, holder_constant=const, quadrature_nodes=proc.get("quadrature_nodes", 4096))


def build_family(scales: dict) -> TimeScaleFamily:
    fast = []
    for f in scales["fast"]:
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in f.items()}
        fast.append(FastScale(**kw))
    return TimeScaleFamily(tuple(scales["alpha"]), tuple(fast))


def build_field_from(cfg: ScenarioConfig, family: TimeScaleFamily) -> FieldSpec:
    params = dict(cfg.field["params"])
    params.setdefault("ell", family.ell)
    return build_field(cfg.field["name"], **params)
