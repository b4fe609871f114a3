import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fibrelax.errors import ConfigInvalid, InvalidParameter, NotConverged
from fibrelax.harness_cli import (
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VALIDATION,
    IbmOutputs,
    Tolerances,
    export_table,
    main,
    parse_config,
    read_table,
    run_scenario,
    validate_equilibrium,
)
from fibrelax.ibm_sim import SimConfig, initial_state, make_rng, order_parameters, run
from fibrelax.kinetic_ops import COEFF_COLUMNS, c_of_r, coefficients_from_r, vm_sample
from fibrelax.model_core import ModelParams

IBM_TINY = {
    "mode": "ibm",
    "seed": 3,
    "model": {"d": 0.2, "nu_f": 5.0, "nu_d": 5.0},
    "sim": {"n_fibers": 60, "dt": 0.01, "t_end": 0.1, "domain": [4.0, 4.0], "n_bins": 16},
}
PDE_TINY = {
    "mode": "pde",
    "seed": 1,
    "model": {"d": 0.5, "alpha": 2.0, "gamma": 1.0},
    "grid": {"n": [8, 8], "t_end": 0.002, "output_stride": 5,
             "rho_init": {"kind": "gaussian", "amplitude": 1.0, "sigma": 0.2, "background": 1.0},
             "theta_init": {"kind": "wave", "amplitude": 0.2, "k": [1, 0]}},
}


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


# ----------------------------------------------------------------- config


@pytest.mark.parametrize("patch, where", [
    ({"bogus": 1}, "bogus"),
    ({"model": {"kappa": 1.0, "extra": 2}}, "model.extra"),
    ({"model": {"kappa": -1.0}}, "model"),
    ({"sim": {"n_fibers": 10, "dt": 0.0}}, "sim"),
    ({"sim": {"n_fibers": 10, "domain": [1.0, 5.0]}}, "sim"),
    ({"sim": {"n_fibers": "ten"}}, "sim.n_fibers"),
    ({"sim": {"linking": "sometimes"}}, "sim.linking"),
    ({"seed": -1}, "seed"),
    ({"mode": "dance"}, "mode"),
    ({"model": {"U1": {"kind": "cos4"}}}, "model.U1.kind"),
])
def test_bad_configs_name_the_field(patch, where):
    data = {**IBM_TINY, **patch}
    with pytest.raises(ConfigInvalid) as exc:
        parse_config(data)
    assert exc.value.path == where


def test_mode_sections_are_required():
    with pytest.raises(ConfigInvalid):
        parse_config({"mode": "ibm"})
    with pytest.raises(ConfigInvalid):
        parse_config({"mode": "pde"})
    assert parse_config({"mode": "coeffs"}).sweep is not None


@pytest.mark.parametrize("data", [IBM_TINY, PDE_TINY, {"mode": "ellipticity", "sweep": {"steps": 7}}])
def test_resolved_config_round_trips(data):
    cfg = parse_config(data)
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


# ----------------------------------------------------------------- tables


def test_empty_table_is_header_only(tmp_path):
    p = export_table([], tmp_path / "e.csv", ["a", "b"])
    assert p.read_text() == "a,b\n"
    with pytest.raises(InvalidParameter):
        export_table([], tmp_path / "f.csv")


def test_coefficient_row_matches_schema(tmp_path):
    p = export_table([coefficients_from_r(1.0, 1.0, 1.0)], tmp_path / "c.csv", COEFF_COLUMNS)
    header, rows = read_table(p)
    assert tuple(header) == COEFF_COLUMNS and len(rows) == 1 and len(rows[0]) == 10


finite = st.floats(allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(finite, st.integers(-10**12, 10**12), st.booleans()), max_size=20))
def test_export_round_trip_is_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("t") / "r.csv"
    recs = [{"x": x, "n": n, "ok": b} for x, n, b in rows]
    export_table(recs, path, ["x", "n", "ok"])
    _, back = read_table(path)
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert float(b["x"]) == a["x"] and b["n"] == a["n"] and b["ok"] is a["ok"]
    assert b"\r" not in path.read_bytes()


# ------------------------------------------------------------- scenarios


def test_coeffs_scenario_writes_rows_and_manifest(tmp_path):
    cfg = parse_config({"mode": "coeffs", "outputs": str(tmp_path / "k.csv"),
                        "sweep": {"r_min": 0.5, "r_max": 2.0, "steps": 3}})
    out = run_scenario(cfg)
    assert out.status == EXIT_OK
    _, rows = read_table(tmp_path / "k.csv")
    assert [r["r"] for r in rows] == pytest.approx([0.5, 1.0, 2.0])
    manifest = json.loads((tmp_path / "k.manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["mode"] == "coeffs"


@pytest.mark.parametrize("data", [IBM_TINY, PDE_TINY])
def test_manifest_reruns_are_byte_identical(tmp_path, data):
    first = tmp_path / "a"
    assert main([data["mode"], "--config", write(tmp_path, data), "--out", str(first)]) == EXIT_OK
    second = tmp_path / "b"
    assert main([data["mode"], "--config", str(first / "manifest.json"), "--out", str(second)]) == EXIT_OK
    names = json.loads((first / "manifest.json").read_text())["outputs"]
    assert names
    for name in names:
        if name == "manifest.json":
            continue
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["coeffs", "--r-min", "0.1", "--r-max", "1", "--steps", "4", "--out", str(tmp_path / "c.csv")]) == EXIT_OK
    assert main(["ellipticity", "--steps", "5", "--d", "2", "--L", "1", "--out", str(tmp_path / "e.csv")]) == EXIT_OK
    _, rows = read_table(tmp_path / "e.csv")
    assert len(rows) == 5 and all(r["elliptic"] is True for r in rows)
    assert main(["ibm"]) == EXIT_CONFIG
    assert main(["ibm", "--config", write(tmp_path, {**IBM_TINY, "oops": 1})]) == EXIT_CONFIG
    assert main(["ibm", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad_dt = {**PDE_TINY, "grid": {**PDE_TINY["grid"], "dt": 1.0, "t_end": 5.0}}
    assert main(["pde", "--config", write(tmp_path, bad_dt, "p.json"), "--out", str(tmp_path / "p")]) == EXIT_NUMERICAL
    strict = {**IBM_TINY, "mode": "validate", "validation": {"r_rel": 0.0, "l1": 0.0, "drift": 2.0}}
    assert main(["validate", "--config", write(tmp_path, strict, "v.json"), "--out", str(tmp_path / "v")]) == EXIT_VALIDATION
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(report) == {"r_theory", "eta_empirical", "r_fitted", "l1_distance", "pass"}
    assert report["pass"] is False


# ------------------------------------------------------------- validation


def synthetic_outputs(seed, r, n_snap=100, per=1000, theta0=0.3):
    rng = np.random.default_rng(seed)
    snaps = [vm_sample(rng, theta0, r, per) for _ in range(n_snap)]
    return IbmOutputs.from_snapshots(snaps, np.arange(n_snap, dtype=float)), np.concatenate(snaps)


def test_synthetic_von_mises_angles_validate():
    out, pooled = synthetic_outputs(0, 2.0)
    params = ModelParams(xi=1.0, alpha=2.0, gamma=4.0, d=1.0, L=1.0)
    rep = validate_equilibrium(out, params, Tolerances(drift=0.05, window=1.0))
    # standard error of r from that of eta through the slope of c
    dc = (c_of_r(2.0 + 1e-5) - c_of_r(2.0 - 1e-5)) / 2e-5
    se_eta = np.std(np.cos(2 * (pooled - 0.3))) / math.sqrt(pooled.size)
    assert abs(rep.r_fitted - 2.0) < 3 * se_eta / dc
    assert rep.l1_distance < 0.05 and rep.passed and rep.r_theory == pytest.approx(2.0)
    assert rep.r_fitted >= 0 and 0 <= rep.l1_distance <= 2


def test_zero_tolerance_always_fails():
    out, _ = synthetic_outputs(1, 2.0)
    params = ModelParams(xi=1.0, alpha=2.0, gamma=4.0)
    assert not validate_equilibrium(out, params, Tolerances(r_rel=0.0, l1=0.0, drift=0.05, window=1.0)).passed


def test_drifting_run_is_not_converged():
    times = np.linspace(0, 1, 50)
    snaps = [vm_sample(np.random.default_rng(k), 0.0, 0.2 + 0.1 * k, 500) for k in range(50)]
    out = IbmOutputs.from_snapshots(snaps, times)
    with pytest.raises(NotConverged):
        validate_equilibrium(out, ModelParams(), Tolerances())


def test_strong_noise_matches_isotropic_baseline():
    n = 200
    params = ModelParams(d=200.0, alpha=1.0, nu_f=1.0, nu_d=1.0)
    cfg = SimConfig(dt=1e-3, t_end=0.4, domain=(6.0, 6.0), seed=4)
    res = run(initial_state(n, cfg.domain, make_rng(4)), params, cfg, make_rng(4))
    eta_ibm = np.array([r.eta for r in res.records[50:]])
    rng = np.random.default_rng(5)
    base = np.array([order_parameters(rng.uniform(-np.pi / 2, np.pi / 2, n)).eta for _ in range(4000)])
    # the IBM samples decorrelate within a few steps, so use a quarter of them as independent
    se = base.std() * math.sqrt(1 / base.size + 4 / eta_ibm.size)
    assert abs(eta_ibm.mean() - base.mean()) < 4 * se
