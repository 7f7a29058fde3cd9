"""Command line front end: scenario configs, presets, artifacts and sweeps.

    tiltlab background  --preset vacuum --out runs/vac
    tiltlab euler-flrw  --config my.yaml --out runs/e1
    tiltlab coupled     --preset coupled-homogeneous --out runs/c7
    tiltlab rates       --preset rates --out runs/r
    tiltlab sweep       --preset regime-sweep --out runs/sweep --threads 4

A config is a YAML (or JSON) mapping; see ``CONFIG_SCHEMA`` below and the
README. A manifest.json written by an earlier run is also accepted as a
config and reproduces that run.

Exit status: 0 all enabled checks passed, 1 some check failed (or a sweep
cell failed), 2 configuration error (no artifacts written), 3 the solver left
its regime (the last good snapshot is saved).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from . import __version__

SCENARIOS = ("background", "euler_flrw", "coupled", "rates_report")
SUBCOMMANDS = {"background": "background", "euler-flrw": "euler_flrw", "coupled": "coupled",
               "rates": "rates_report"}
EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

DEFAULT_CHECKS = {
    "background": ("de_sitter", "constraint_monitors", "rates"),
    "euler_flrw": ("closed_form", "rates", "indicator_decay"),
    "coupled": ("rates", "null_limit", "energy_bounded", "constraint_growth"),
    "rates_report": ("params", "fits"),
}
KNOWN_CHECKS = {
    "background": {"de_sitter", "constraint_monitors", "rates"},
    "euler_flrw": {"closed_form", "rates", "indicator_decay", "indicator_drift"},
    "coupled": {"rates", "null_limit", "energy_bounded", "constraint_growth", "gauge_order", "ode_drift"},
    "rates_report": {"params", "fits"},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# schema


@dataclass
class BackgroundSpec:
    G_inf: Tuple[float, float, float] = (0.5, 0.55, 0.45)
    k_inf3: Tuple[float, float, float] = (0.1, -0.2, 0.05)
    v1_inf: float = 1.0
    P_inf: float = 0.01


@dataclass
class PerturbationSpec:
    amplitude: float = 0.0
    kind: str = "homogeneous_constraint_solved"   # coupled runs only
    kmin: int = 1
    seed: int = 0


@dataclass
class IntegratorSpec:
    tol: float = 3e-14
    dt: Optional[float] = None
    dt_max: Optional[float] = None
    cfl: float = 0.5
    c_parab: float = 1.0
    filter_strength: float = 0.0
    output_every: float = 0.1
    lapse: str = "trace"


@dataclass
class FitSpec:
    window: Optional[Tuple[float, float]] = None   # relative to T
    tolerance: float = 0.05


@dataclass
class ScenarioConfig:
    """Everything a run needs; defaults are filled per scenario by ``resolve``."""

    scenario: str
    cs2: Any = 0.4
    Lambda: float = 3.0
    L: int = 4
    N: int = 3
    T: float = 2.0
    t_end: Optional[float] = None
    t_start: Optional[float] = None
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    integrator: IntegratorSpec = field(default_factory=IntegratorSpec)
    fit: FitSpec = field(default_factory=FitSpec)
    checks: Optional[List[str]] = None
    top_order_L: Optional[List[int]] = None
    series: Optional[str] = None
    grid: Dict[str, List[Any]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cs2"] = _cs2_repr(self.cs2)
        d["grid"] = {k: [_cs2_repr(x) if k == "cs2" else x for x in v] for k, v in self.grid.items()}
        return d


SECTIONS = {"background": BackgroundSpec, "perturbation": PerturbationSpec, "integrator": IntegratorSpec,
            "fit": FitSpec}


def _cs2_repr(x):
    return f"{x.numerator}/{x.denominator}" if isinstance(x, Fraction) else x


def parse_cs2(value, where: str = "cs2"):
    """Float, int or a rational written 'p/q' (kept exact)."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        x = float(value)
    elif isinstance(value, str):
        try:
            x = Fraction(value.strip()) if "/" in value else float(value)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{where}: cannot parse {value!r} as a number") from None
    elif isinstance(value, Fraction):
        x = value
    else:
        raise ConfigError(f"{where}: expected a number, got {type(value).__name__}")
    if not 0 < x < 1:
        raise ConfigError(f"{where}: must lie in (0, 1), got {value!r}")
    return x


def _number(value, where: str, integer: bool = False, positive: bool = False, allow_none: bool = False):
    if value is None and allow_none:
        return None
    if isinstance(value, str) and not integer:
        # YAML 1.1 reads exponent forms without a dot, such as 1e-12, as strings
        try:
            value = float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected {'an integer' if integer else 'a number'}, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{where}: must be finite")
    if positive and not value > 0:
        raise ConfigError(f"{where}: must be positive, got {value!r}")
    return int(value) if integer else float(value)


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = cls.__dataclass_fields__
    for key in raw:
        if key not in known:
            raise ConfigError(f"{where}.{key}: unknown field (allowed: {', '.join(known)})")
    return cls(**raw)


def _triple(value, where):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError(f"{where}: expected three numbers")
    return tuple(_number(x, f"{where}[{i}]") for i, x in enumerate(value))


def validate(raw: dict) -> ScenarioConfig:
    """Turn a parsed mapping into a checked :class:`ScenarioConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    if "config" in raw and "artifacts" in raw:
        raw = raw["config"]   # a manifest from an earlier run
    raw = dict(raw)
    known = ScenarioConfig.__dataclass_fields__
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown field (allowed: {', '.join(known)})")
    scen = raw.get("scenario")
    if scen not in SCENARIOS:
        raise ConfigError(f"scenario: must be one of {SCENARIOS}, got {scen!r}")
    kw: Dict[str, Any] = {"scenario": scen}
    kw["cs2"] = parse_cs2(raw.get("cs2", 0.4))
    kw["Lambda"] = _number(raw.get("Lambda", 3.0), "Lambda", positive=True)
    kw["L"] = _number(raw.get("L", 4), "L", integer=True)
    if not 0 <= kw["L"] <= 12:
        raise ConfigError(f"L: must lie in [0, 12], got {kw['L']}")
    kw["N"] = _number(raw.get("N", 3), "N", integer=True)
    if kw["N"] < 2:
        raise ConfigError("N: must be at least 2")
    kw["T"] = _number(raw.get("T", 2.0), "T")
    kw["t_end"] = _number(raw.get("t_end"), "t_end", allow_none=True)
    kw["t_start"] = _number(raw.get("t_start"), "t_start", allow_none=True)
    for name, cls in SECTIONS.items():
        kw[name] = _section(cls, raw.get(name), name)
    b = kw["background"]
    b.G_inf = _triple(b.G_inf, "background.G_inf")
    if min(b.G_inf) <= 0:
        raise ConfigError("background.G_inf: entries must be positive")
    b.k_inf3 = _triple(b.k_inf3, "background.k_inf3")
    b.v1_inf = _number(b.v1_inf, "background.v1_inf")
    b.P_inf = _number(b.P_inf, "background.P_inf")
    if b.P_inf < 0:
        raise ConfigError("background.P_inf: must be non-negative")
    pt = kw["perturbation"]
    pt.amplitude = _number(pt.amplitude, "perturbation.amplitude")
    if not 0 <= pt.amplitude < 0.5:
        raise ConfigError("perturbation.amplitude: must lie in [0, 0.5)")
    if pt.kind not in ("homogeneous_constraint_solved", "inhomogeneous_free"):
        raise ConfigError(f"perturbation.kind: unknown kind {pt.kind!r}")
    pt.kmin = _number(pt.kmin, "perturbation.kmin", integer=True)
    pt.seed = _number(pt.seed, "perturbation.seed", integer=True)
    ig = kw["integrator"]
    ig.tol = _number(ig.tol, "integrator.tol", positive=True)
    ig.dt = _number(ig.dt, "integrator.dt", positive=True, allow_none=True)
    ig.dt_max = _number(ig.dt_max, "integrator.dt_max", positive=True, allow_none=True)
    ig.cfl = _number(ig.cfl, "integrator.cfl", positive=True)
    ig.c_parab = _number(ig.c_parab, "integrator.c_parab", positive=True)
    ig.filter_strength = _number(ig.filter_strength, "integrator.filter_strength")
    ig.output_every = _number(ig.output_every, "integrator.output_every", positive=True)
    if ig.lapse not in ("parabolic", "parabolic_raw", "trace"):
        raise ConfigError(f"integrator.lapse: unknown form {ig.lapse!r}")
    ft = kw["fit"]
    if ft.window is not None:
        if not isinstance(ft.window, (list, tuple)) or len(ft.window) != 2:
            raise ConfigError("fit.window: expected [start, end] relative to T")
        ft.window = (_number(ft.window[0], "fit.window[0]"), _number(ft.window[1], "fit.window[1]"))
        if not ft.window[1] > ft.window[0]:
            raise ConfigError("fit.window: end must exceed start")
    ft.tolerance = _number(ft.tolerance, "fit.tolerance", positive=True)
    checks = raw.get("checks")
    if checks is not None:
        if not isinstance(checks, list) or not all(isinstance(c, str) for c in checks):
            raise ConfigError("checks: expected a list of names")
        bad = [c for c in checks if c not in KNOWN_CHECKS[scen]]
        if bad:
            raise ConfigError(f"checks: unknown for {scen}: {bad} (allowed: {sorted(KNOWN_CHECKS[scen])})")
    kw["checks"] = checks
    tl = raw.get("top_order_L")
    if tl is not None:
        if not isinstance(tl, list) or not tl:
            raise ConfigError("top_order_L: expected a non-empty list of band limits")
        kw["top_order_L"] = [_number(x, f"top_order_L[{i}]", integer=True) for i, x in enumerate(tl)]
    series = raw.get("series")
    if series is not None and not isinstance(series, str):
        raise ConfigError("series: expected a path")
    kw["series"] = series
    grid = raw.get("grid") or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid: expected a mapping of field -> list of values")
    for key, values in grid.items():
        if not isinstance(values, list):
            raise ConfigError(f"grid.{key}: expected a list")
        if key == "cs2":
            grid[key] = [parse_cs2(v, f"grid.cs2[{i}]") for i, v in enumerate(values)]
    kw["grid"] = dict(grid)
    cfg = ScenarioConfig(**kw)
    _check_span(cfg)
    return cfg


def _check_span(cfg: ScenarioConfig) -> None:
    T, t_end = cfg.T, resolved_t_end(cfg)
    if cfg.scenario != "rates_report" and not t_end > T:
        raise ConfigError(f"t_end: must exceed T={T}, got {t_end}")
    if cfg.scenario in ("background", "coupled"):
        ts = resolved_t_start(cfg)
        if math.exp(-2.0 * math.sqrt(cfg.Lambda / 3.0) * ts) >= 1e-4:
            raise ConfigError(f"t_start: {ts} too early for the late-time expansion (need e^(-2H t_start) < 1e-4)")
        if not ts > T:
            raise ConfigError("t_start: must exceed T")


def resolved_t_end(cfg: ScenarioConfig) -> float:
    if cfg.t_end is not None:
        return cfg.t_end
    span = {"background": 5.0, "euler_flrw": 8.0, "coupled": 5.0, "rates_report": 0.0}[cfg.scenario]
    return cfg.T + span / math.sqrt(cfg.Lambda / 3.0)


def resolved_t_start(cfg: ScenarioConfig) -> float:
    if cfg.t_start is not None:
        return cfg.t_start
    return cfg.T + 8.0 / math.sqrt(cfg.Lambda / 3.0)


def load_config(path: str) -> ScenarioConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if Path(path).suffix == ".json":
        try:
            return validate(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}: parse error{where}: {getattr(exc, 'problem', exc)}") from None
    return validate(raw)


# ---------------------------------------------------------------------------
# presets


PRESETS: Dict[str, dict] = {
    "vacuum": {
        "scenario": "background", "cs2": 0.4, "T": 2.0, "t_start": 7.0,
        "background": {"G_inf": [0.5, 0.5, 0.5], "k_inf3": [0, 0, 0], "v1_inf": 0.0, "P_inf": 0.0},
        "integrator": {"tol": 1e-12, "output_every": 0.05},
    },
    "tilted-background": {
        "scenario": "background", "cs2": 0.4, "T": 2.0, "t_start": 10.0,
        "integrator": {"tol": 3e-14, "output_every": 0.05},
        "fit": {"window": [1.0, 6.0], "tolerance": 0.01},
    },
    "euler-homogeneous": {
        "scenario": "euler_flrw", "cs2": 0.5, "L": 0, "T": 0.0, "t_end": 10.0,
        "background": {"v1_inf": 1.0, "P_inf": 0.01},
        "integrator": {"dt_max": 0.008, "output_every": 0.5},
        "grid": {"cs2": [0.36, 0.5, 0.8]},
    },
    "euler-inhomogeneous": {
        "scenario": "euler_flrw", "cs2": 0.5, "L": 4, "T": 0.0, "t_end": 8.0,
        "background": {"v1_inf": 1.0, "P_inf": 0.01},
        "perturbation": {"amplitude": 1e-3, "seed": 3},
        "integrator": {"dt_max": 0.1, "output_every": 0.1},
        "fit": {"window": [3.0, 8.0], "tolerance": 0.05},
        "grid": {"cs2": [0.36, 0.5, 0.8]},
    },
    "coupled-homogeneous": {
        "scenario": "coupled", "cs2": 0.4, "L": 0, "T": 2.0, "t_end": 12.0,
        "perturbation": {"amplitude": 1e-3, "kind": "homogeneous_constraint_solved", "seed": 2},
        "integrator": {"dt_max": 0.025, "output_every": 0.1},
        "fit": {"window": [3.0, 7.0], "tolerance": 0.05},
        "checks": ["rates", "null_limit", "ode_drift"],
    },
    "coupled-inhomogeneous": {
        "scenario": "coupled", "cs2": 0.4, "L": 4, "T": 2.0, "t_end": 7.0,
        "perturbation": {"amplitude": 1e-4, "kind": "inhomogeneous_free", "seed": 1},
        "integrator": {"dt": 0.02, "output_every": 0.25},
        "checks": ["energy_bounded", "constraint_growth", "gauge_order"],
    },
    "top-order-probe": {
        "scenario": "coupled", "cs2": 0.5, "L": 4, "T": 2.0, "t_end": 7.0,
        "perturbation": {"amplitude": 1e-4, "kind": "inhomogeneous_free", "seed": 1},
        "integrator": {"output_every": 0.25},
        "checks": [],
        "top_order_L": [3, 4],
        "grid": {"cs2": [0.5, 0.6]},
    },
    "regime-sweep": {
        "scenario": "euler_flrw", "cs2": 0.4, "L": 0, "T": 0.0, "t_end": 10.0,
        "background": {"v1_inf": 1.0, "P_inf": 0.01},
        "integrator": {"dt_max": 0.01, "output_every": 0.25},
        "fit": {"window": [4.0, 10.0], "tolerance": 0.05},
        "grid": {"cs2": [0.2, "1/3", 0.4, 0.6]},
    },
    "rates": {"scenario": "rates_report", "cs2": "3/7"},
}


def preset(name: str) -> ScenarioConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(sorted(PRESETS))})")
    return validate(copy.deepcopy(PRESETS[name]))


def with_overrides(cfg: ScenarioConfig, overrides: Dict[str, Any], keep_grid: bool = False) -> ScenarioConfig:
    """Copy with dotted-path fields replaced, re-validated."""
    raw = cfg.to_dict()
    if not keep_grid:
        raw.pop("grid", None)
    for path, value in overrides.items():
        node = raw
        parts = path.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"grid.{path}: no such section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"grid.{path}: no such field")
        node[parts[-1]] = _cs2_repr(value) if path == "cs2" else value
    return validate(raw)


# ---------------------------------------------------------------------------
# results and artifacts


class RegimeAbort(RuntimeError):
    def __init__(self, message: str, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class RunResult:
    columns: List[str]
    rows: List[List[float]]
    rates: List[dict] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)


def _rate_entry(name: str, fit, target, window) -> dict:
    target = float(target)
    return {"variable": name, "fitted_exponent": fit.exponent, "target_exponent": target,
            "relative_deviation": fit.deviation(target), "residual": fit.residual, "window": list(window),
            "samples": fit.samples}


def _enabled(cfg: ScenarioConfig) -> Tuple[str, ...]:
    return tuple(cfg.checks) if cfg.checks is not None else DEFAULT_CHECKS[cfg.scenario]


def _window(cfg: ScenarioConfig, default: Tuple[float, float]) -> Tuple[float, float]:
    w = cfg.fit.window or default
    return (cfg.T + w[0], cfg.T + w[1])


# ---------------------------------------------------------------------------
# scenario runners


def run_background(cfg: ScenarioConfig) -> RunResult:
    import numpy as np
    from .background import AsymptoticData, constraint_monitor, integrate_background, reconstruct_metric
    from .diagnostics import fit_rate
    from .params import derive_params, rate_table

    p = derive_params(cfg.cs2, cfg.Lambda)
    H = float(p.H)
    b = cfg.background
    data = AsymptoticData(G_inf=tuple(b.G_inf), k_inf3=tuple(b.k_inf3), v1_inf=b.v1_inf, P_inf=b.P_inf)
    ts = resolved_t_start(cfg)
    traj = integrate_background(data, p, cfg.T, ts, tol=cfg.integrator.tol)
    n = int(round((ts - cfg.T) / cfg.integrator.output_every)) + 1
    times = np.linspace(cfg.T, ts, n)
    cols = ["t", "G1", "G2", "G3", "G", "theta", "rho", "C0", "C1", "de_sitter_rel_err"]
    rows = []
    vacuum_iso = b.P_inf == 0.0 and len(set(b.G_inf)) == 1 and not any(b.k_inf3)
    rs = float(p.rs)
    for t in times:
        y = traj(t)
        G1, G2, G3, G, theta = reconstruct_metric(y, p)
        rho = y[14] ** (1.0 / (1.0 - 2.0 * rs)) if y[14] > 0 else 0.0
        C0, C1 = constraint_monitor(y, p)
        ds = abs(G1 * H / math.cosh(H * t) - 1.0) if vacuum_iso else float("nan")
        rows.append([t, G1, G2, G3, G, theta, rho, C0, C1, ds])
    res = RunResult(columns=cols, rows=rows)
    enabled = _enabled(cfg)
    arr = np.array(rows)
    if vacuum_iso:
        err = float(np.nanmax(arr[:, 9]))
        res.details["de_sitter_max_rel_err"] = err
        if "de_sitter" in enabled:
            res.checks["de_sitter"] = err <= 1e-9
    if "constraint_monitors" in enabled and not vacuum_iso:
        ok0, ok1 = traj.monitors_bounded(2.0)
        res.checks["constraint_monitors"] = ok0 and ok1
    m0, m1 = traj.weighted_monitors()
    r0, r1 = traj.monitor_reference()
    ratio = lambda m, r: float(m.max() / r) if r > 0 else 0.0
    res.details.update({"C0_weighted_ratio": ratio(m0, r0), "C1_weighted_ratio": ratio(m1, r1),
                        "background_steps": traj.stats["steps"]})
    if b.P_inf > 0:
        table = rate_table(p)
        win = _window(cfg, (1.0, 6.0))
        t = arr[:, 0]
        fits = {
            "tilt": (fit_rate(t, np.abs(np.sinh(arr[:, 5])), win, H=H), table["tilt"]),
            "rho_background": (fit_rate(t, arr[:, 6], win, H=H), table["rho_background"]),
            "G_offdiag": (fit_rate(t, np.abs(arr[:, 4]), win, H=H), table["G_offdiag"]),
        }
        # sinh(theta) = rho^{-rs} v1 is the tilt itself
        tol = {"tilt": cfg.fit.tolerance, "rho_background": cfg.fit.tolerance, "G_offdiag": 0.05}
        for name, (f, target) in fits.items():
            res.rates.append(_rate_entry(name, f, target, win))
        if "rates" in enabled:
            res.checks["rates"] = all(f.deviation(float(tg)) <= tol[k] for k, (f, tg) in fits.items())
    return res


def run_euler(cfg: ScenarioConfig) -> RunResult:
    import numpy as np
    from .background import flrw
    from .diagnostics import extreme_tilt_indicator, final_efold_drift, fit_rate, hatted, norm_sq
    from .euler_flrw import (FluidRegimeExit, HomogeneousFluid, StepperConfig, evolve, perturb_background,
                             random_modes)
    from .params import derive_params, rate_table
    from .s3_frame import space

    p = derive_params(cfg.cs2, cfg.Lambda)
    bg = flrw(p)
    H = bg.H
    L, N = cfg.L, cfg.N
    hf = HomogeneousFluid.from_asymptotic(cfg.background.v1_inf, cfg.background.P_inf, p, bg)
    state = hf.state(cfg.T, L)
    amp = cfg.perturbation.amplitude
    if amp > 0:
        rng = np.random.default_rng(cfg.perturbation.seed)
        state = perturb_background(state, amp, random_modes(rng, L, kmin=cfg.perturbation.kmin))
    ig = cfg.integrator
    sc = StepperConfig(L=L, t_end=resolved_t_end(cfg), dt=ig.dt, cfl=ig.cfl,
                       dt_max=ig.dt_max if ig.dt_max is not None else 0.02,
                       filter_strength=ig.filter_strength, output_every=ig.output_every)
    try:
        run = evolve(state, sc, bg, p)
    except FluidRegimeExit as exc:
        raise RegimeAbort(str(exc), exc.last_good) from exc
    S = space(L)
    rs = float(p.rs)
    cols = ["t", "v_hat", "rho2rs_hat", "tilt", "tilt_indicator", "null_defect", "v1_rel_err", "rho2rs_rel_err"]
    rows = []
    for s in run.snapshots:
        h = hatted(s, hf)
        v1, _, r2 = hf.at(s.t)
        m_v1, m_r2 = float(S.mean(s.v[0])), float(S.mean(s.rho2rs))
        et = extreme_tilt_indicator(s, p)
        rows.append([s.t, math.sqrt(norm_sq(h.v_all, L, N - 1)), math.sqrt(norm_sq(h.rho2rs, L, N - 2)),
                     abs(m_v1) / math.sqrt(m_r2), et.sup, et.null_defect,
                     abs(m_v1 / v1 - 1.0) if v1 else abs(m_v1), abs(m_r2 / r2 - 1.0)])
    arr = np.array(rows)
    t = arr[:, 0]
    res = RunResult(columns=cols, rows=rows, details={"steps": run.steps, "rs": rs})
    enabled = _enabled(cfg)
    table = rate_table(p)
    win = _window(cfg, (3.0, resolved_t_end(cfg) - cfg.T))
    tol = cfg.fit.tolerance
    columns = {"tilt_homogeneous": 3, "tilt_indicator": 4}
    if amp > 0:
        columns.update(v_hat=1, rho2rs_hat=2)
    fits = {}
    for name, col in columns.items():
        try:
            fits[name] = (fit_rate(t, arr[:, col], win, H=H), table[name])
        except ValueError as exc:   # short run or a sign change on the window
            res.details[f"{name}_fit_error"] = str(exc)
    for name, (f, target) in fits.items():
        res.rates.append(_rate_entry(name, f, target, win))

    def within(name):
        return name in fits and fits[name][0].deviation(float(fits[name][1])) <= tol

    if amp == 0:
        err = float(max(arr[:, 6].max(), arr[:, 7].max()))
        res.details["closed_form_max_rel_err"] = err
        if "closed_form" in enabled:
            res.checks["closed_form"] = err <= 1e-8
    elif "rates" in enabled:
        res.checks["rates"] = within("v_hat") and within("rho2rs_hat")
    if "indicator_decay" in enabled and float(p.cs2) > 1.0 / 3.0:
        res.checks["indicator_decay"] = within("tilt_indicator")
    try:
        drift = final_efold_drift(t, arr[:, 4], H)
    except ValueError as exc:
        drift = float("nan")
        res.details["tilt_indicator_drift_error"] = str(exc)
    res.details["tilt_indicator_final_efold_drift"] = drift
    if "indicator_drift" in enabled:
        res.checks["indicator_drift"] = drift < 0.01
    return res


def run_coupled(cfg: ScenarioConfig) -> RunResult:
    import numpy as np
    from .background import AsymptoticData, integrate_background
    from .diagnostics import energies, fit_rate, hatted, hatted_norms, limits, top_order_probe
    from .einstein_euler import (CoupledConfig, CoupledRegimeExit, MeanCurvature, build_initial_data,
                                 choose_dt_coupled, evolve_coupled)
    from .params import derive_params, rate_table

    p = derive_params(cfg.cs2, cfg.Lambda)
    H = float(p.H)
    b = cfg.background
    data = AsymptoticData(G_inf=tuple(b.G_inf), k_inf3=tuple(b.k_inf3), v1_inf=b.v1_inf, P_inf=b.P_inf)
    ts = resolved_t_start(cfg)
    t_end = resolved_t_end(cfg)
    traj = integrate_background(data, p, cfg.T, ts, tol=cfg.integrator.tol,
                                t_end=t_end if t_end > ts else None)
    bgm = MeanCurvature(traj)
    ig = cfg.integrator
    pt = cfg.perturbation

    def one_run(L, dt=None):
        s0, meta = build_initial_data(bgm, pt.kind, pt.amplitude, L, T=cfg.T, seed=pt.seed, kmin=pt.kmin)
        cc = CoupledConfig(L=L, t_end=t_end, dt=dt if dt is not None else ig.dt, cfl=ig.cfl, c_parab=ig.c_parab,
                           dt_max=ig.dt_max if ig.dt_max is not None else 0.05,
                           filter_strength=ig.filter_strength, output_every=ig.output_every, lapse=ig.lapse)
        try:
            return evolve_coupled(s0, cc, bgm, p), meta, cc, s0
        except CoupledRegimeExit as exc:
            raise RegimeAbort(str(exc), exc.last_good) from exc

    L, N = cfg.L, cfg.N
    run, meta, cc, s0 = one_run(L)
    cols = ["t", "k_hat", "n_hat", "e_hat", "gamma_hat", "v_hat", "rho2rs_hat", "E_geom", "E_fluid_low",
            "E_fluid_top", "E_tot", "gauge", "ham", "mom"]
    rows = []
    hats = []
    for s, g, hm, mm in zip(run.snapshots, run.gauge, run.ham, run.mom):
        h = hatted(s, bgm)
        hats.append(h)
        nm = hatted_norms(h)
        e = energies(h, p, N=N)
        rows.append([s.t, nm["k"], nm["n"], nm["e"], nm["gamma"], nm["v_all"], nm["rho2rs"], e.E_geom,
                     e.E_fluid_low, e.E_fluid_top, e.E_tot, g, hm, mm])
    arr = np.array(rows)
    t = arr[:, 0]
    res = RunResult(columns=cols, rows=rows,
                    details={"steps": run.steps, "initial_data": {k: v for k, v in meta.items() if k != "C"},
                             "lapse": ig.lapse})
    enabled = _enabled(cfg)
    table = rate_table(p)
    tol = cfg.fit.tolerance
    if pt.amplitude > 0 and ("rates" in enabled or cfg.fit.window is not None):
        win = _window(cfg, (3.0, min(7.0, t_end - cfg.T)))
        fits = {}
        for name, col in (("k_hat", 1), ("n_hat", 2), ("e_hat", 3)):
            if np.all(arr[(t >= win[0]) & (t <= win[1]), col] > 0):
                try:
                    fits[name] = (fit_rate(t, arr[:, col], win, H=H), table[name])
                except ValueError as exc:
                    res.details[f"{name}_fit_error"] = str(exc)
        for name, (f, target) in fits.items():
            res.rates.append(_rate_entry(name, f, target, win))
        if "rates" in enabled:
            res.checks["rates"] = len(fits) == 3 and all(f.deviation(float(tg)) <= tol for f, tg in fits.values())
    if "null_limit" in enabled or pt.kind == "homogeneous_constraint_solved":
        try:
            lim = limits(t, run.snapshots, p, bgm)
            res.details["null_defect"] = lim.null_defect
            res.details["limit_drift"] = lim.drift
            if "null_limit" in enabled:
                res.checks["null_limit"] = lim.null_defect <= 1e-3
        except ValueError as exc:
            res.details["null_defect_error"] = str(exc)
            if "null_limit" in enabled:
                res.checks["null_limit"] = False
    Et = arr[:, 10]
    res.details["E_tot_max_ratio"] = float(Et.max() / Et[0]) if Et[0] > 0 else float("nan")
    if "energy_bounded" in enabled:
        res.checks["energy_bounded"] = bool(Et[0] > 0 and Et.max() <= 2.0 * Et[0])
    ham0, mom0 = arr[0, 12], arr[0, 13]
    c0 = math.hypot(ham0, mom0)
    cmax = float(np.max(np.hypot(arr[:, 12], arr[:, 13])))
    res.details["constraint_growth"] = cmax / c0 if c0 > 0 else float("nan")
    if "constraint_growth" in enabled:
        res.checks["constraint_growth"] = bool(c0 > 0 and cmax <= 10.0 * c0)
    if "ode_drift" in enabled:
        # homogeneous runs: distance to the same run with half the step
        if L != 0:
            raise ConfigError("checks: ode_drift needs L = 0")
        dt_half = 0.5 * min(choose_dt_coupled(cc, s0.pack(), p), ig.output_every)
        run2, *_ = one_run(L, dt=dt_half)
        diffs = [np.abs(a.pack() - b_.pack()).max() / np.abs(b_.pack()).max()
                 for a, b_ in zip(run.snapshots, run2.snapshots)]
        res.details["ode_step_halving_rel_diff"] = float(max(diffs))
        res.checks["ode_drift"] = max(diffs) <= 1e-9
    if "gauge_order" in enabled:
        dt0 = ig.dt if ig.dt is not None else choose_dt_coupled(cc, s0.pack(), p)
        g_coarse = max(run.gauge) if ig.dt is not None else max(one_run(L, dt=dt0)[0].gauge)
        g_fine = max(one_run(L, dt=0.5 * dt0)[0].gauge)
        ratio = g_coarse / g_fine if g_fine > 0 else float("inf")
        res.details["gauge_halving_ratio"] = ratio
        res.checks["gauge_order"] = 16.0 * 0.75 <= ratio <= 16.0 * 1.25
    if cfg.top_order_L:
        runs = {}
        for Lp in cfg.top_order_L:
            r = run if Lp == L else one_run(Lp)[0]
            runs[Lp] = [hatted(s, bgm) for s in r.snapshots]
        try:
            res.details["top_order_probe"] = top_order_probe(runs, p, N=N).as_dict()
        except ValueError as exc:
            res.details["top_order_probe_error"] = str(exc)
    return res


def run_rates(cfg: ScenarioConfig) -> RunResult:
    import numpy as np
    from .diagnostics import fit_rate
    from .params import As_from_rs, derive_params, rate_table, weight_identity_residual

    p = derive_params(cfg.cs2, cfg.Lambda)
    table = rate_table(p)
    cols = ["variable", "target_exponent", "rate"]
    rows = [[k, float(table[k]), table.rate(k)] for k in table]
    res = RunResult(columns=cols, rows=rows)
    ident = abs(float(As_from_rs(p.rs) - p.As))
    weight = abs(float(weight_identity_residual(p)))
    res.details.update({"regime": p.regime.value, "cs2": _cs2_repr(p.cs2), "rs": float(p.rs), "As": float(p.As),
                        "exact": {k: str(table[k]) for k in table}, "As_identity_residual": ident,
                        "weight_identity_residual": weight})
    enabled = _enabled(cfg)
    if "params" in enabled:
        res.checks["params"] = ident <= 1e-13 and weight <= 1e-13
    if cfg.series:
        path = Path(cfg.series)
        try:
            with path.open(newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                data = np.array([[float(x) for x in row] for row in reader])
        except (OSError, StopIteration, ValueError) as exc:
            raise ConfigError(f"series: cannot read {path}: {exc}") from None
        if header[0] != "t":
            raise ConfigError("series: first column must be t")
        t = data[:, 0]
        win = _window(cfg, (0.0, float(t[-1] - cfg.T))) if cfg.fit.window else (float(t[0]), float(t[-1]))
        ok = True
        for j, name in enumerate(header[1:], start=1):
            if name in table:
                f = fit_rate(t, data[:, j], win, H=float(p.H))
                res.rates.append(_rate_entry(name, f, table[name], win))
                ok &= f.deviation(float(table[name])) <= cfg.fit.tolerance
        if "fits" in enabled:
            res.checks["fits"] = ok and bool(res.rates)
    return res


RUNNERS = {"background": run_background, "euler_flrw": run_euler, "coupled": run_coupled,
           "rates_report": run_rates}


# ---------------------------------------------------------------------------
# artifacts


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return repr(float(x))


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Fraction):
        return _cs2_repr(obj)
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else str(obj)
    if hasattr(obj, "item"):
        return _jsonable(obj.item())
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _versions() -> dict:
    import numpy
    import scipy
    return {"tiltlab": __version__, "python": platform.python_version(), "numpy": numpy.__version__,
            "scipy": scipy.__version__}


def execute(cfg: ScenarioConfig, out: Path) -> int:
    """Run one scenario and write its artifacts into ``out``; returns the exit status."""
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    artifacts: List[Path] = []
    status = "ok"
    message = None
    try:
        res = RUNNERS[cfg.scenario](cfg)
    except RegimeAbort as exc:
        status, message = "aborted", str(exc)
        res = None
        if exc.snapshot is not None:
            import numpy as np
            snap = out / "last_good.npz"
            np.savez(snap, t=exc.snapshot.t, y=exc.snapshot.pack(), L=exc.snapshot.L)
            artifacts.append(snap)
            message += f" (last good snapshot: {snap})"
    if res is not None:
        series = out / "series.csv"
        write_csv(series, res.columns, res.rows)
        artifacts.append(series)
        report = out / "rates.json"
        write_json(report, {"scenario": cfg.scenario, "cs2": cfg.cs2, "rates": res.rates, "details": res.details})
        artifacts.append(report)
    checks = res.checks if res is not None else {}
    failed = [k for k, ok in checks.items() if not ok]
    if status == "ok" and failed:
        status = "failed"
    manifest = {
        "config": cfg.to_dict(),
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - t0,
        "seed": cfg.perturbation.seed,
        "status": status,
        "message": message,
        "checks": checks,
        "artifacts": [{"path": a.name, "sha256": _sha256(a), "bytes": a.stat().st_size} for a in artifacts],
    }
    write_json(out / "manifest.json", manifest)
    for k, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {cfg.scenario}:{k}")
    if message:
        print(f"ABORT {message}", file=sys.stderr)
    if status == "aborted":
        return EXIT_ABORT
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# sweeps


def expand_grid(grid: Dict[str, List[Any]]) -> List[Dict[str, Any]]:
    import itertools
    if not grid or any(len(v) == 0 for v in grid.values()):
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_cell(args):
    index, cfg_dict, out = args
    _limit_threads(1)
    cfg = validate(cfg_dict)
    try:
        code = execute(cfg, Path(out))
        err = None
    except Exception as exc:   # reported per cell, never fatal to the sweep
        code, err = EXIT_ABORT, f"{type(exc).__name__}: {exc}"
    return index, code, err


def sweep(cfg: ScenarioConfig, out: Path, threads: int = 1) -> int:
    from concurrent.futures import ProcessPoolExecutor

    from .params import classify_regime

    cells = expand_grid(cfg.grid)
    out.mkdir(parents=True, exist_ok=True)
    cell_cfgs = []
    for i, over in enumerate(cells):
        c = with_overrides(cfg, over)
        cell_cfgs.append((i, c.to_dict(), str(out / f"cell_{i:03d}")))
    results = {}
    if threads > 1 and len(cell_cfgs) > 1:
        import multiprocessing as mp
        with ProcessPoolExecutor(max_workers=threads, mp_context=mp.get_context("spawn")) as ex:
            for i, code, err in ex.map(_sweep_cell, cell_cfgs):
                results[i] = (code, err)
    else:
        for args in cell_cfgs:
            i, code, err = _sweep_cell(args)
            results[i] = (code, err)
    header = ["cell"] + list(cfg.grid) + ["regime", "status", "exit_code"]
    rate_names: List[str] = []
    table_rows = []
    for i, over in enumerate(cells):
        code, err = results[i]
        cdir = out / f"cell_{i:03d}"
        rates = {}
        rj = cdir / "rates.json"
        if rj.exists():
            for r in json.loads(rj.read_text())["rates"]:
                rates[r["variable"]] = r
                if r["variable"] not in rate_names:
                    rate_names.append(r["variable"])
        cs2 = parse_cs2(over.get("cs2", cfg.cs2))
        status = {EXIT_OK: "ok", EXIT_CHECK: "failed", EXIT_ABORT: "aborted"}.get(code, "error")
        table_rows.append((i, over, classify_regime(cs2).value, status if err is None else f"error: {err}",
                           code, rates))
    for name in rate_names:
        header += [f"{name}_fitted", f"{name}_target"]
    rows = []
    for i, over, regime, status, code, rates in table_rows:
        row = [i] + [_cs2_repr(over[k]) for k in cfg.grid] + [regime, status, code]
        for name in rate_names:
            r = rates.get(name)
            row += [r["fitted_exponent"], r["target_exponent"]] if r else ["", ""]
        rows.append(row)
    with (out / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, str) else _fmt(x) if isinstance(x, float) else x for x in row])
    failed = [i for i, *_r in table_rows if results[i][0] != EXIT_OK]
    write_json(out / "sweep.json", {"template": cfg.to_dict(), "cells": len(cells), "failed_cells": failed,
                                    "columns": header, "rows": rows})
    for i in failed:
        print(f"FAIL sweep cell {i}: {table_rows[i][1]} ({table_rows[i][3]})")
    print(f"sweep: {len(cells)} cells, {len(failed)} failed")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tiltlab", description="Tilted fluid cosmology experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in list(SUBCOMMANDS) + ["sweep"]:
        sp = sub.add_parser(name)
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="YAML/JSON config file (or an earlier manifest.json)")
        src.add_argument("--preset", help=f"named preset: {', '.join(sorted(PRESETS))}")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker threads (sweep: parallel runs)")
        sp.add_argument("--seed", type=int, default=None, help="override perturbation.seed")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    _limit_threads(1 if args.command == "sweep" else args.threads)
    try:
        cfg = load_config(args.config) if args.config else preset(args.preset)
        if args.seed is not None:
            cfg = with_overrides(cfg, {"perturbation.seed": args.seed}, keep_grid=True)
        if args.command != "sweep":
            want = SUBCOMMANDS[args.command]
            if cfg.scenario != want:
                raise ConfigError(f"scenario: config is {cfg.scenario!r} but subcommand {args.command!r} "
                                  f"runs {want!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    if args.command == "sweep":
        return sweep(cfg, out, threads=args.threads)
    try:
        return execute(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
