import csv
import json
import math

import numpy as np
import pytest

from kinetic_annihilation.empirical import TestFunction, identity_residual
from kinetic_annihilation.harness import (AuditReport, ConvergenceReport, ExperimentConfig,
                                          fit_log_slope, main, max_doubling_ratio,
                                          replicate_seed, run_compare, run_identity_audit,
                                          run_kernel_check, run_simulate, run_solve_pde)
from kinetic_annihilation.model import Mollifier, UniformBall
from kinetic_annihilation.particle_sim import ParticleSystem, StepPlan, run


def _tiny(tmp_path, **kw):
    base = dict(n_ladder=[60, 120], seeds=3, T=0.2, dt=0.004, observe_every=25,
                grid={"nx": 64, "nv": 64, "dt": 0.1, "subsample": 2}, k_max=8,
                out_dir=str(tmp_path / "out"))
    base.update(kw)
    return ExperimentConfig(**base)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_roundtrip_and_hash(tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg and back.to_json() == cfg.to_json()
    assert cfg.replace(out_dir="elsewhere", workers=4).config_hash == cfg.config_hash
    assert cfg.replace(seeds=65).config_hash != cfg.config_hash
    assert len(cfg.config_hash) == 16


@pytest.mark.parametrize("bad", [
    {"mode": "plot"}, {"d": 0}, {"n_ladder": []}, {"seeds": 0}, {"T": 1.0, "dt": 0.3},
    {"scaling": {"mode": "local", "alpha": 0.5}}, {"mollifier": "gauss"},
    {"f0": {"name": "gaussian"}}, {"grid": {"nx": 1, "nv": 8, "dt": 0.1}},
    {"grid": {"nx": 8, "nv": 8, "dt": 0.3}}, {"snapshot_format": "hdf5"}, {"test_function": 0},
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ExperimentConfig(**bad)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ExperimentConfig.from_json(json.dumps({"seed": 3}))


def test_replicate_seed_scheme():
    assert replicate_seed(1, 250, 0) == replicate_seed(1, 250, 0)
    seeds = {replicate_seed(20261016, n, r) for n in (250, 500) for r in range(100)}
    assert len(seeds) == 200
    assert replicate_seed(1, 250, 0) == int(
        np.random.SeedSequence([1, 250, 0]).generate_state(1, dtype=np.uint64)[0])


def test_fit_log_slope_exact_power_law():
    ns = [250, 500, 1000, 2000]
    assert fit_log_slope(ns, [3.0 * n**-0.5 for n in ns]) == pytest.approx(-0.5)


def test_convergence_report_aggregates_and_roundtrips(tmp_path):
    rng = np.random.default_rng(0)
    rows = [{"N": n, "rep": r, "seed": r, "weak_distance": float(n**-0.5 * (1 + 0.1 * rng.normal())),
             "mass_T": 0.5, "events": 3, "gaps": [0.1, 0.2]}
            for n in (100, 400, 1600) for r in range(20)]
    rep = ConvergenceReport("h", rows, bootstrap_seed=3)
    assert rep.strictly_decreasing and rep.slope_negative
    assert rep.slope_ci[0] < -0.5 < rep.slope_ci[1]
    rep.write_csv(tmp_path / "d.csv")
    back = ConvergenceReport.from_csv(tmp_path / "d.csv", bootstrap_seed=3)
    assert back.summary() == rep.summary()


def test_audit_report_flags_and_ratios():
    # same standardized residuals at both N: variance ratio exactly 2
    z = np.linspace(-2, 2, 401)
    rows = [{"N": n, "rep": r, "seed": r, "residual": float(z[r] / math.sqrt(n))}
            for n in (100, 200) for r in range(401)]
    rows.append({"N": 200, "rep": 999, "seed": 0, "residual": 5.0})
    rep = AuditReport("h", rows)
    assert [(r["N"], r["rep"]) for r in rep.flagged] == [(200, 999)]
    assert len(rep.ratios) == 1
    clean = AuditReport("h", rows[:-1])
    assert clean.ratios[0] == pytest.approx(2.0) and clean.ratios_ok and clean.means_ok


def test_zero_test_function_gives_zero_residual():
    zero = TestFunction(lambda x, v, t=0.0: np.zeros(np.shape(x)[:-1]), 10.0,
                        generator_fn=lambda x, v, t=0.0, diffusion=0.5: np.zeros(np.shape(x)[:-1]))
    for seed in range(3):
        s = ParticleSystem.from_density(UniformBall(1), 200, Mollifier(1), 1 / 200, seed=seed)
        assert identity_residual(run(s, 0.2, StepPlan(0.004)), zero) == 0.0


def test_run_compare_outputs_and_determinism(tmp_path):
    cfg = _tiny(tmp_path)
    a = run_compare(cfg)
    b = run_compare(cfg, out_dir=tmp_path / "again")
    assert a.summary() == b.summary()
    out = tmp_path / "out"
    assert (out / "distances.csv").read_bytes() == (tmp_path / "again" / "distances.csv").read_bytes()
    report = json.loads((out / "report.json").read_text())
    assert report["config_hash"] == cfg.config_hash and not report["partial"]
    rows = _read_csv(out / "distances.csv")
    assert len(rows) == 6 and all(r["config_hash"] == cfg.config_hash for r in rows)
    assert len([k for k in rows[0] if k.startswith("gap_")]) == 8
    path = _read_csv(out / "path_distances.csv")
    assert sorted({float(r["t"]) for r in path}) == pytest.approx([0.0, 0.1, 0.2])
    assert _read_csv(out / "mass.csv")[0]["alive_fraction"] == "1.0"
    # the CSV alone reproduces the aggregate
    again = ConvergenceReport.from_csv(out / "distances.csv", bootstrap_seed=cfg.master_seed)
    assert again.summary() == a.summary()


def test_run_compare_parallel_matches_serial(tmp_path):
    cfg = _tiny(tmp_path, seeds=2)
    serial = run_compare(cfg, write=False)
    parallel = run_compare(cfg.replace(workers=2), write=False)
    assert serial.summary() == parallel.summary()


def test_free_compare_decays_like_inverse_root_n(tmp_path):
    cfg = ExperimentConfig(interacting=False, seeds=64, out_dir=str(tmp_path))
    rep = run_compare(cfg, write=False)
    assert rep.strictly_decreasing
    assert abs(rep.slope + 0.5) <= 0.15


def test_run_identity_audit_small(tmp_path):
    cfg = _tiny(tmp_path, mode="audit", seeds=6)
    rep = run_identity_audit(cfg)
    assert set(rep.ladder) == {60, 120} and len(rep.rows) == 12
    rows = _read_csv(tmp_path / "out" / "audit.csv")
    assert rows[0]["config_hash"] == cfg.config_hash
    assert "variance_ratios" in json.loads((tmp_path / "out" / "report.json").read_text())


@pytest.mark.parametrize("fmt", ["csv", "binary"])
def test_run_simulate_writes_artifacts(tmp_path, fmt):
    cfg = _tiny(tmp_path, mode="simulate", seeds=2, snapshot_format=fmt)
    summary = run_simulate(cfg)
    out = tmp_path / "out"
    assert len(summary["runs"]) == 4
    ev = _read_csv(out / "events.csv")
    assert len(ev) == sum(r["events"] for r in summary["runs"])
    suffix = ".csv" if fmt == "csv" else ".npy"
    assert (out / "snapshots" / f"N60_rep0{suffix}").exists()


def test_run_solve_pde_writes_fields(tmp_path):
    cfg = _tiny(tmp_path, mode="solve-pde")
    s = run_solve_pde(cfg)
    assert s["ledger_residual"] < 1e-10 and 0 < s["mass_T"] < 1
    out = tmp_path / "out"
    assert (out / "fields" / "field_0000.json").exists()
    assert (out / "marginals.csv").exists() and (out / "mass.csv").exists()


def test_run_kernel_check_table(tmp_path):
    cfg = _tiny(tmp_path, mode="kernel-check")
    rows = run_kernel_check(cfg, shells=False)
    names = [r[0] for r in rows]
    assert names.count("normalization_P") == 3 and names.count("normalization_Pstar") == 3
    assert all(bool(r[4]) for r in rows)
    table = _read_csv(tmp_path / "out" / "kernel_table.csv")
    assert len(table) == len(rows)
    assert json.loads((tmp_path / "out" / "report.json").read_text())["checks"]


def test_max_doubling_ratio_is_exact():
    r = max_doubling_ratio(200, seed=3)
    assert r.denominator >= 1 and 8 < r <= 16


def test_cli_subcommands(tmp_path, capsys):
    cfg = _tiny(tmp_path, seeds=2)
    cfg.save(tmp_path / "c.json")
    for cmd in ("simulate", "solve-pde", "audit"):
        out = tmp_path / cmd
        code = main([cmd, "--config", str(tmp_path / "c.json"), "--out", str(out),
                     "--seeds", "2", "--workers", "1"])
        assert (out / "report.json").exists() and (out / "config.json").exists()
        if cmd != "audit":
            assert code == 0
        saved = ExperimentConfig.load(out / "config.json")
        assert saved.mode == cmd and saved.out_dir == str(out)
    code = main(["compare", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "cmp")])
    assert code in (0, 1)
    assert "slope" in capsys.readouterr().out
    with pytest.raises(SystemExit):
        main(["bogus"])
