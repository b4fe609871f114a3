"""Scenario configs, orchestration, equilibrium validation, table export and
the ``fibrelax`` command line.

A scenario is a JSON document. Every run writes ``manifest.json`` holding the
fully resolved config, the package version and the seed; feeding a manifest
back as ``--config`` reproduces the run byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .errors import (
    ConfigInvalid,
    FibrelaxError,
    InvalidParameter,
    IoError,
    NotConverged,
)
from .ibm_sim import (
    OBSERVABLE_COLUMNS,
    RunResult,
    SimConfig,
    angle_bin_edges,
    initial_state,
    make_rng,
    order_parameters,
    run,
    write_snapshot,
)
from .kinetic_ops import (
    COEFF_COLUMNS,
    coefficients,
    coefficients_from_r,
    concentration,
    invert_c,
    vm_bin_probabilities,
)
from .macro_pde import (
    ELLIPTICITY_COLUMNS,
    MacroState,
    ellipticity_sweep,
    rho_stability_limit,
    rho_step,
    theta_stability_limit,
    theta_step,
)
from .model_core import (
    Cos2Angular,
    ModelParams,
    QuadraticWell,
    ZeroAngular,
    ZeroSpatial,
)

MODES = ("ibm", "coeffs", "pde", "ellipticity", "validate")
EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VALIDATION = 4
MANIFEST_VERSION = 1


# ------------------------------------------------------------ sections


@dataclass(frozen=True)
class IbmSection:
    n_fibers: int = 1000
    dt: float = 2e-3
    t_end: float = 1.0
    domain: tuple[float, float] = (5.0, 5.0)
    output_stride: int = 1
    n_bins: int = 32
    linking: str = "constant"
    max_link_ratio: float = 0.5
    neighbor_cell_size: Optional[float] = None
    initial_angles: str = "uniform"

    def sim_config(self, seed: int) -> SimConfig:
        return SimConfig(dt=self.dt, t_end=self.t_end, domain=self.domain, seed=seed,
                         neighbor_cell_size=self.neighbor_cell_size, output_stride=self.output_stride,
                         n_bins=self.n_bins, linking=self.linking, max_link_ratio=self.max_link_ratio)


@dataclass(frozen=True)
class GridSection:
    n: tuple[int, int] = (64, 64)
    extent: tuple[float, float] = (1.0, 1.0)
    t_end: float = 0.01
    dt: Optional[float] = None
    cfl_fraction: float = 0.5
    output_stride: int = 100
    rho_init: dict = dataclasses.field(default_factory=lambda: {"kind": "uniform", "value": 1.0})
    theta_init: dict = dataclasses.field(default_factory=lambda: {"kind": "constant", "value": 0.0})


@dataclass(frozen=True)
class SweepSection:
    r_min: float = 1e-3
    r_max: float = 100.0
    steps: int = 100
    scale: str = "log"

    def grid(self) -> np.ndarray:
        if self.scale == "log":
            return np.geomspace(self.r_min, self.r_max, self.steps)
        return np.linspace(self.r_min, self.r_max, self.steps)


@dataclass(frozen=True)
class Tolerances:
    """Validation thresholds. ``window`` is the trailing fraction of the run
    used for averages; ``drift`` bounds the change of mean eta between its
    two halves."""

    r_rel: float = 0.15
    l1: float = 0.08
    drift: float = 0.01
    window: float = 0.2


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str
    model: ModelParams
    seed: int = 0
    outputs: str = "out"
    sim: Optional[IbmSection] = None
    grid: Optional[GridSection] = None
    sweep: Optional[SweepSection] = None
    validation: Tolerances = Tolerances()

    def to_dict(self) -> dict:
        """Resolved JSON form; parsing it gives back an equal config."""
        out: dict[str, Any] = {"mode": self.mode, "seed": self.seed, "outputs": self.outputs,
                               "model": model_to_dict(self.model)}
        for name in ("sim", "grid", "sweep"):
            sec = getattr(self, name)
            if sec is not None:
                out[name] = _jsonable(dataclasses.asdict(sec))
        out["validation"] = dataclasses.asdict(self.validation)
        return out


# ------------------------------------------------------ field coercion

_MODEL_SCALARS = ("mu", "lam", "kappa", "alpha", "beta", "d", "nu_f", "nu_d", "L", "xi", "gamma")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _num(value, path: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid(path, f"expected a number, got {value!r}")
    if integer:
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigInvalid(path, f"expected an integer, got {value!r}")
            value = int(value)
        return int(value)
    v = float(value)
    if not math.isfinite(v):
        raise ConfigInvalid(path, "must be finite")
    return v


def _pair(value, path: str, integer: bool = False):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigInvalid(path, f"expected a list of two numbers, got {value!r}")
    return (_num(value[0], f"{path}[0]", integer), _num(value[1], f"{path}[1]", integer))


def _str(value, path: str, choices: Sequence[str]):
    if value not in choices:
        raise ConfigInvalid(path, f"expected one of {list(choices)}, got {value!r}")
    return value


def _object(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigInvalid(path, "expected an object")
    return value


def _check_keys(data: dict, allowed: Iterable[str], path: str) -> None:
    allowed = set(allowed)
    for key in data:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigInvalid(where, "unknown key")


# ---------------------------------------------------------- potentials


def spatial_potential_from_spec(spec, path: str, box):
    spec = _object(spec, path)
    kind = spec.get("kind")
    if kind == "zero":
        _check_keys(spec, ("kind",), path)
        return ZeroSpatial()
    if kind == "quadratic_well":
        _check_keys(spec, ("kind", "k", "center"), path)
        k = _num(spec.get("k", 1.0), f"{path}.k")
        if k < 0:
            raise ConfigInvalid(f"{path}.k", "must be >= 0")
        center = _pair(spec.get("center", [0.0, 0.0]), f"{path}.center")
        return QuadraticWell(k, center, None if box is None else tuple(box))
    raise ConfigInvalid(f"{path}.kind", f"unknown spatial potential {kind!r}")


def angular_potential_from_spec(spec, path: str):
    spec = _object(spec, path)
    kind = spec.get("kind")
    if kind == "zero":
        _check_keys(spec, ("kind",), path)
        return ZeroAngular()
    if kind == "cos2":
        _check_keys(spec, ("kind", "u", "theta_star"), path)
        return Cos2Angular(_num(spec.get("u", 1.0), f"{path}.u"),
                           _num(spec.get("theta_star", 0.0), f"{path}.theta_star"))
    raise ConfigInvalid(f"{path}.kind", f"unknown angular potential {kind!r}")


def potential_to_spec(U) -> dict:
    if isinstance(U, (ZeroSpatial, ZeroAngular)):
        return {"kind": "zero"}
    if isinstance(U, QuadraticWell):
        return {"kind": "quadratic_well", "k": U.k, "center": list(U.center)}
    if isinstance(U, Cos2Angular):
        return {"kind": "cos2", "u": U.u, "theta_star": U.theta_star}
    raise InvalidParameter(f"no config form for potential {type(U).__name__}")


def model_to_dict(m: ModelParams) -> dict:
    out = {k: getattr(m, k) for k in _MODEL_SCALARS}
    out["U0"] = potential_to_spec(m.U0)
    out["U1"] = potential_to_spec(m.U1)
    return out


# ------------------------------------------------------------- parsing


def _parse_model(data, box) -> ModelParams:
    data = _object(data, "model")
    _check_keys(data, _MODEL_SCALARS + ("U0", "U1"), "model")
    kw = {k: _num(data[k], f"model.{k}") for k in _MODEL_SCALARS if k in data}
    kw["U0"] = spatial_potential_from_spec(data.get("U0", {"kind": "zero"}), "model.U0", box)
    kw["U1"] = angular_potential_from_spec(data.get("U1", {"kind": "zero"}), "model.U1")
    try:
        return ModelParams(**kw)
    except InvalidParameter as exc:
        raise ConfigInvalid("model", str(exc)) from exc


def _parse_sim(data) -> IbmSection:
    data = _object(data, "sim")
    names = [f.name for f in dataclasses.fields(IbmSection)]
    _check_keys(data, names, "sim")
    kw: dict[str, Any] = {}
    for k in ("n_fibers", "output_stride", "n_bins"):
        if k in data:
            kw[k] = _num(data[k], f"sim.{k}", integer=True)
    for k in ("dt", "t_end", "max_link_ratio"):
        if k in data:
            kw[k] = _num(data[k], f"sim.{k}")
    if "domain" in data:
        kw["domain"] = _pair(data["domain"], "sim.domain")
    if data.get("neighbor_cell_size") is not None:
        kw["neighbor_cell_size"] = _num(data["neighbor_cell_size"], "sim.neighbor_cell_size")
    if "linking" in data:
        kw["linking"] = _str(data["linking"], "sim.linking", ("constant", "density_adaptive"))
    if "initial_angles" in data:
        kw["initial_angles"] = _str(data["initial_angles"], "sim.initial_angles", ("uniform", "aligned"))
    sec = IbmSection(**kw)
    if sec.n_fibers < 1:
        raise ConfigInvalid("sim.n_fibers", "must be >= 1")
    return sec


_RHO_INIT_KEYS = {"uniform": ("kind", "value"),
                  "gaussian": ("kind", "amplitude", "sigma", "center", "background")}
_THETA_INIT_KEYS = {"constant": ("kind", "value"),
                    "wave": ("kind", "value", "amplitude", "k"),
                    "random": ("kind", "value", "amplitude")}


def _parse_init(spec, path: str, table: dict) -> dict:
    spec = _object(spec, path)
    kind = spec.get("kind")
    if kind not in table:
        raise ConfigInvalid(f"{path}.kind", f"expected one of {sorted(table)}, got {kind!r}")
    _check_keys(spec, table[kind], path)
    out: dict[str, Any] = {"kind": kind}
    for key in table[kind][1:]:
        if key in spec:
            if key in ("center",):
                out[key] = list(_pair(spec[key], f"{path}.{key}"))
            elif key == "k":
                out[key] = list(_pair(spec[key], f"{path}.{key}", integer=True))
            else:
                out[key] = _num(spec[key], f"{path}.{key}")
    return out


def _parse_grid(data) -> GridSection:
    data = _object(data, "grid")
    names = [f.name for f in dataclasses.fields(GridSection)]
    _check_keys(data, names, "grid")
    kw: dict[str, Any] = {}
    if "n" in data:
        kw["n"] = _pair(data["n"], "grid.n", integer=True)
        if min(kw["n"]) < 4:
            raise ConfigInvalid("grid.n", "need at least 4 cells per axis")
    if "extent" in data:
        kw["extent"] = _pair(data["extent"], "grid.extent")
        if min(kw["extent"]) <= 0:
            raise ConfigInvalid("grid.extent", "must be > 0")
    for k in ("t_end", "cfl_fraction"):
        if k in data:
            kw[k] = _num(data[k], f"grid.{k}")
    if data.get("dt") is not None:
        kw["dt"] = _num(data["dt"], "grid.dt")
        if kw["dt"] <= 0:
            raise ConfigInvalid("grid.dt", "must be > 0")
    if "output_stride" in data:
        kw["output_stride"] = _num(data["output_stride"], "grid.output_stride", integer=True)
    if "rho_init" in data:
        kw["rho_init"] = _parse_init(data["rho_init"], "grid.rho_init", _RHO_INIT_KEYS)
    if "theta_init" in data:
        kw["theta_init"] = _parse_init(data["theta_init"], "grid.theta_init", _THETA_INIT_KEYS)
    sec = GridSection(**kw)
    if sec.t_end < 0:
        raise ConfigInvalid("grid.t_end", "must be >= 0")
    if not 0 < sec.cfl_fraction <= 1:
        raise ConfigInvalid("grid.cfl_fraction", "must be in (0, 1]")
    if sec.output_stride < 1:
        raise ConfigInvalid("grid.output_stride", "must be >= 1")
    return sec


def _parse_sweep(data) -> SweepSection:
    data = _object(data, "sweep")
    _check_keys(data, [f.name for f in dataclasses.fields(SweepSection)], "sweep")
    kw: dict[str, Any] = {}
    for k in ("r_min", "r_max"):
        if k in data:
            kw[k] = _num(data[k], f"sweep.{k}")
    if "steps" in data:
        kw["steps"] = _num(data["steps"], "sweep.steps", integer=True)
    if "scale" in data:
        kw["scale"] = _str(data["scale"], "sweep.scale", ("log", "linear"))
    sec = SweepSection(**kw)
    if not sec.r_min > 0:
        raise ConfigInvalid("sweep.r_min", "must be > 0")
    if sec.r_max < sec.r_min:
        raise ConfigInvalid("sweep.r_max", "must be >= r_min")
    if sec.steps < 1:
        raise ConfigInvalid("sweep.steps", "must be >= 1")
    return sec


def _parse_tolerances(data) -> Tolerances:
    data = _object(data, "validation")
    _check_keys(data, [f.name for f in dataclasses.fields(Tolerances)], "validation")
    kw = {k: _num(v, f"validation.{k}") for k, v in data.items()}
    tol = Tolerances(**kw)
    for k in ("r_rel", "l1", "drift"):
        if getattr(tol, k) < 0:
            raise ConfigInvalid(f"validation.{k}", "must be >= 0")
    if not 0 < tol.window <= 1:
        raise ConfigInvalid("validation.window", "must be in (0, 1]")
    return tol


def parse_config(data: dict) -> ScenarioConfig:
    """Validate a config document; raises ConfigInvalid naming the field."""
    data = _object(data, "")
    if "manifest_version" in data:
        data = _object(data.get("config"), "config")
    _check_keys(data, ("mode", "seed", "outputs", "model", "sim", "grid", "sweep", "validation"), "")
    mode = _str(data.get("mode"), "mode", MODES)
    seed = _num(data.get("seed", 0), "seed", integer=True)
    if not 0 <= seed < 2**64:
        raise ConfigInvalid("seed", "must be in [0, 2^64)")
    outputs = data.get("outputs", "out")
    if not isinstance(outputs, str) or not outputs:
        raise ConfigInvalid("outputs", "expected a non-empty path string")

    sim = _parse_sim(data["sim"]) if "sim" in data else None
    grid = _parse_grid(data["grid"]) if "grid" in data else None
    sweep = _parse_sweep(data["sweep"]) if "sweep" in data else None
    validation = _parse_tolerances(data.get("validation", {}))

    if mode in ("ibm", "validate") and sim is None:
        raise ConfigInvalid("sim", f"section required for mode {mode!r}")
    if mode == "pde" and grid is None:
        raise ConfigInvalid("grid", "section required for mode 'pde'")
    if mode in ("coeffs", "ellipticity") and sweep is None:
        sweep = SweepSection()

    box = sim.domain if mode in ("ibm", "validate") else (grid.extent if grid is not None else None)
    model = _parse_model(data.get("model", {}), box)
    if sim is not None:
        try:
            sim.sim_config(seed).validate(model.L)
        except InvalidParameter as exc:
            raise ConfigInvalid("sim", str(exc)) from exc
    return ScenarioConfig(mode=mode, model=model, seed=seed, outputs=outputs, sim=sim,
                          grid=grid, sweep=sweep, validation=validation)


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(str(path), f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(str(path), f"invalid JSON: {exc}") from exc
    return parse_config(data)


# -------------------------------------------------------------- tables


def _format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _as_row(rec) -> dict:
    if isinstance(rec, dict):
        return rec
    for name in ("as_row", "row"):
        if hasattr(rec, name):
            return getattr(rec, name)()
    raise InvalidParameter(f"cannot tabulate {type(rec).__name__}")


def export_table(records, path, columns: Optional[Sequence[str]] = None, format: str = "csv") -> Path:
    """Write records as RFC-4180 CSV with LF line endings and 17 significant
    digits for floats. ``columns`` is required for an empty record list."""
    if format != "csv":
        raise InvalidParameter(f"unsupported table format {format!r}")
    rows = [_as_row(r) for r in records]
    if columns is None:
        if not rows:
            raise InvalidParameter("columns are required for an empty table")
        columns = list(rows[0])
    columns = list(columns)
    for k, row in enumerate(rows):
        if list(row) != columns:
            raise InvalidParameter(f"record {k} has columns {list(row)}, expected {columns}")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_format_cell(row[c]) for c in columns])
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def _parse_cell(s: str):
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_table(path) -> tuple[list[str], list[dict]]:
    """Inverse of ``export_table``."""
    try:
        with Path(path).open(newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            rows = [dict(zip(header, map(_parse_cell, line))) for line in r]
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return header, rows


# ----------------------------------------------------------- validation


@dataclass(frozen=True)
class ValidationReport:
    r_theory: float
    eta_empirical: float
    r_fitted: float
    l1_distance: float
    passed: bool

    def to_json_dict(self) -> dict:
        return {
            "r_theory": self.r_theory,
            "eta_empirical": self.eta_empirical,
            "r_fitted": self.r_fitted,
            "l1_distance": self.l1_distance,
            "pass": self.passed,
        }


@dataclass(frozen=True)
class IbmOutputs:
    """What validation needs from a particle run: the eta time series and
    the angles of each dump measured from that dump's mean direction."""

    times: np.ndarray
    etas: np.ndarray
    centered_angles: tuple

    @classmethod
    def from_run(cls, result: RunResult) -> "IbmOutputs":
        return cls(np.array([r.time for r in result.records]),
                   np.array([r.eta for r in result.records]),
                   tuple(result.centered_angles))

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[np.ndarray], times: Sequence[float]) -> "IbmOutputs":
        etas, centered = [], []
        for a in snapshots:
            op = order_parameters(a)
            etas.append(op.eta)
            centered.append(np.mod(np.asarray(a) - op.theta_mean + np.pi / 2, np.pi) - np.pi / 2)
        return cls(np.asarray(times, dtype=float), np.array(etas), tuple(centered))


def trailing_window(times: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of samples in the last ``fraction`` of the time span."""
    t0, t1 = float(times[0]), float(times[-1])
    return np.flatnonzero(times >= t1 - fraction * (t1 - t0))


def eta_drift(outputs: IbmOutputs, fraction: float) -> float:
    idx = trailing_window(outputs.times, fraction)
    if len(idx) < 2:
        raise NotConverged("trailing window holds fewer than two samples")
    half = len(idx) // 2
    return float(abs(np.mean(outputs.etas[idx[:half]]) - np.mean(outputs.etas[idx[half:]])))


def validate_equilibrium(ibm_outputs, params: ModelParams, tolerances: Tolerances = Tolerances(),
                         n_bins: int = 32) -> ValidationReport:
    """Compare a particle run at steady state with the von Mises equilibrium.

    The fitted concentration inverts c(r) at the window-mean eta; the
    density distance is the L1 distance between binned probabilities.
    """
    out = ibm_outputs if isinstance(ibm_outputs, IbmOutputs) else IbmOutputs.from_run(ibm_outputs)
    drift = eta_drift(out, tolerances.window)
    if not drift < tolerances.drift:
        raise NotConverged(f"eta drift {drift:.4g} over the trailing window exceeds {tolerances.drift:.4g}")
    idx = trailing_window(out.times, tolerances.window)
    eta = float(np.mean(out.etas[idx]))
    r_fit = invert_c(eta)
    angles = np.concatenate([np.asarray(out.centered_angles[k], dtype=float) for k in idx])
    edges = angle_bin_edges(n_bins)
    counts = np.histogram(angles, edges)[0]
    l1 = float(np.sum(np.abs(counts / counts.sum() - vm_bin_probabilities(edges, 0.0, r_fit))))
    r_th = concentration(params.d, params.L, params.xi, params.alpha, params.gamma)
    passed = bool(abs(r_fit - r_th) / r_th < tolerances.r_rel and l1 < tolerances.l1)
    return ValidationReport(r_theory=r_th, eta_empirical=eta, r_fitted=r_fit, l1_distance=l1, passed=passed)


# --------------------------------------------------------- orchestration


@dataclass
class RunOutcome:
    status: int
    files: list[Path]
    report: Optional[ValidationReport] = None


def _write_json(path: Path, data) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def _table_target(outputs: str, default_name: str) -> Path:
    p = Path(outputs)
    return p if p.suffix == ".csv" else p / default_name


def _run_ibm(cfg: ScenarioConfig, out_dir: Path) -> tuple[RunResult, list[Path]]:
    sim = cfg.sim.sim_config(cfg.seed)
    rng = make_rng(cfg.seed)
    state = initial_state(cfg.sim.n_fibers, sim.domain, rng, cfg.sim.initial_angles)
    result = run(state, cfg.model, sim, rng)
    files = [export_table([r.row() for r in result.records], out_dir / "observables.csv", OBSERVABLE_COLUMNS)]
    hist_cols = ["time"] + [f"bin_{k:02d}" for k in range(sim.n_bins)]
    hist_rows = [dict(zip(hist_cols, [r.time] + [int(c) for c in r.angle_histogram])) for r in result.records]
    files.append(export_table(hist_rows, out_dir / "angle_histograms.csv", hist_cols))
    snap = out_dir / "final_state.fibs"
    write_snapshot(snap, result.state)
    files.append(snap)
    return result, files


def _initial_rho(spec: dict, X, Y, extent) -> np.ndarray:
    if spec["kind"] == "uniform":
        return np.full(X.shape, spec.get("value", 1.0))
    amp, sig = spec.get("amplitude", 1.0), spec.get("sigma", 0.1)
    cx, cy = spec.get("center", [extent[0] / 2, extent[1] / 2])
    dx = X - cx - extent[0] * np.round((X - cx) / extent[0])
    dy = Y - cy - extent[1] * np.round((Y - cy) / extent[1])
    return spec.get("background", 0.0) + amp * np.exp(-(dx**2 + dy**2) / (2 * sig**2))


def _initial_theta(spec: dict, X, Y, extent, rng) -> np.ndarray:
    base = spec.get("value", 0.0)
    if spec["kind"] == "constant":
        return np.full(X.shape, base)
    amp = spec.get("amplitude", 0.1)
    if spec["kind"] == "wave":
        kx, ky = spec.get("k", [1, 0])
        return base + amp * np.sin(2 * np.pi * (kx * X / extent[0] + ky * Y / extent[1]))
    return base + amp * rng.uniform(-1.0, 1.0, X.shape)


def _write_grid(grid: np.ndarray, path: Path) -> Path:
    cols = [f"y{j}" for j in range(grid.shape[1])]
    return export_table([dict(zip(cols, map(float, row))) for row in grid], path, cols)


def _run_pde(cfg: ScenarioConfig, out_dir: Path) -> list[Path]:
    g, m = cfg.grid, cfg.model
    spacing = (g.extent[0] / g.n[0], g.extent[1] / g.n[1])
    k = coefficients(m.d, m.L, m.xi, m.alpha, m.gamma, m.nu_f, m.nu_d)
    shell = MacroState.from_theta(np.ones(g.n), np.zeros(g.n), spacing)
    X, Y = shell.cell_centers()
    rng = make_rng(cfg.seed)
    state = MacroState.from_theta(_initial_rho(g.rho_init, X, Y, g.extent),
                                  _initial_theta(g.theta_init, X, Y, g.extent, rng), spacing)
    U0 = m.U0
    U1 = None if isinstance(m.U1, ZeroAngular) else m.U1
    dt = g.dt
    if dt is None:
        dt = g.cfl_fraction * min(rho_stability_limit(state, U0, m.d), theta_stability_limit(state, k, U0))
    n_steps = int(round(g.t_end / dt))
    files: list[Path] = []
    series = []

    def dump(idx):
        files.append(_write_grid(state.rho, out_dir / f"rho_{idx:04d}.csv"))
        files.append(_write_grid(state.theta0, out_dir / f"theta_{idx:04d}.csv"))
        series.append({"time": state.time, "mass": state.mass, "eta": state.mean_eta})

    dump(0)
    for step in range(1, n_steps + 1):
        new_rho = rho_step(state, U0, m.d, dt)
        new_theta = theta_step(state, k, U0, U1, dt)
        state = MacroState(new_rho.rho, new_theta.c2, new_theta.s2, new_rho.time, spacing)
        if step % g.output_stride == 0:
            dump(step // g.output_stride)
    files.append(export_table(series, out_dir / "series.csv", ("time", "mass", "eta")))
    return files


def run_scenario(cfg: ScenarioConfig) -> RunOutcome:
    """Dispatch one scenario and write its artifacts plus a manifest.

    Returns status 0, or 4 when a validation run fails its tolerances.
    Numerical failures propagate as exceptions.
    """
    status = EXIT_OK
    report = None
    if cfg.mode in ("coeffs", "ellipticity"):
        name = "coeffs.csv" if cfg.mode == "coeffs" else "ellipticity.csv"
        target = _table_target(cfg.outputs, name)
        r_grid = cfg.sweep.grid()
        if cfg.mode == "coeffs":
            rows = [coefficients_from_r(float(r), cfg.model.d, cfg.model.L).as_row() for r in r_grid]
            files = [export_table(rows, target, COEFF_COLUMNS)]
        else:
            rows = [rep.as_row() for rep in ellipticity_sweep(r_grid, cfg.model.d, cfg.model.L)]
            files = [export_table(rows, target, ELLIPTICITY_COLUMNS)]
        if Path(cfg.outputs).suffix == ".csv":
            manifest = target.with_name(target.stem + ".manifest.json")
        else:
            manifest = target.parent / "manifest.json"
    else:
        out_dir = Path(cfg.outputs)
        if cfg.mode == "pde":
            files = _run_pde(cfg, out_dir)
        else:
            result, files = _run_ibm(cfg, out_dir)
            if cfg.mode == "validate":
                report = validate_equilibrium(result, cfg.model, cfg.validation, cfg.sim.n_bins)
                files.append(_write_json(out_dir / "validation.json", report.to_json_dict()))
                status = EXIT_OK if report.passed else EXIT_VALIDATION
        manifest = out_dir / "manifest.json"
    files.append(_write_json(manifest, {
        "manifest_version": MANIFEST_VERSION,
        "fibrelax_version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "outputs": [str(f.relative_to(manifest.parent)) for f in files],
    }))
    return RunOutcome(status, files, report)


# ------------------------------------------------------------------ CLI


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fibrelax", description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", help="scenario JSON or a manifest.json from an earlier run")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (coeffs/ellipticity: a .csv path or a directory)")
    p.add_argument("--r-min", type=float, dest="r_min")
    p.add_argument("--r-max", type=float, dest="r_max")
    p.add_argument("--steps", type=int)
    p.add_argument("--d", type=float)
    p.add_argument("--L", type=float)
    p.add_argument("--version", action="version", version=f"fibrelax {__version__}")
    return p


def _raw_config(args) -> dict:
    if args.config is None:
        if args.mode not in ("coeffs", "ellipticity"):
            raise ConfigInvalid("--config", f"required for mode {args.mode!r}")
        data: dict = {"mode": args.mode}
    else:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigInvalid(args.config, f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(args.config, f"invalid JSON: {exc}") from exc
        if isinstance(data, dict) and "manifest_version" in data:
            data = data.get("config")
        if not isinstance(data, dict):
            raise ConfigInvalid(args.config, "expected a JSON object")
        data = dict(data)
        if data.get("mode", args.mode) != args.mode:
            raise ConfigInvalid("mode", f"config is for mode {data.get('mode')!r}, not {args.mode!r}")
        data["mode"] = args.mode
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["outputs"] = args.out
    sweep = {k: getattr(args, k) for k in ("r_min", "r_max", "steps") if getattr(args, k) is not None}
    if sweep:
        data["sweep"] = {**data.get("sweep", {}), **sweep}
    model = {k: getattr(args, k) for k in ("d", "L") if getattr(args, k) is not None}
    if model:
        data["model"] = {**data.get("model", {}), **model}
    return data


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(_raw_config(args))
        outcome = run_scenario(cfg)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FibrelaxError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if outcome.report is not None:
        print(json.dumps(outcome.report.to_json_dict(), sort_keys=True))
    return outcome.status


if __name__ == "__main__":
    sys.exit(main())
