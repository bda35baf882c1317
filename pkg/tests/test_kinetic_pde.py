import json
import math
import warnings

import numpy as np
import pytest

from kinetic_annihilation.empirical import family_member
from kinetic_annihilation.kernels import free_density
from kinetic_annihilation.kinetic_pde import (DensityField, LeakageError, PhaseGrid,
                                              diffusion_step, gronwall_paired_run,
                                              l1_contraction_check, reaction_step, sink_integral,
                                              solve, transport_step, weak_residual,
                                              write_marginals_csv, write_mass_csv)
from kinetic_annihilation.model import UniformBall


def _gauss_field(grid, mass=1.5, var=0.3, v0=0.2):
    x, v = grid.mesh()
    vals = np.exp(-np.sum(x**2, -1) / (2 * var) - np.sum((v - v0) ** 2, -1) / (2 * var))
    return DensityField(grid, mass * vals / (2 * math.pi * var) ** grid.d)


def _lattice_grid(hv, dt, Lx=4.0, Lv=5.0):
    """Odd nv puts v nodes on multiples of hv; hx = hv*dt makes every shift a lattice shift."""
    nv = int(round(2 * Lv / hv))
    nv += nv % 2 == 0
    hx = hv * dt
    nx = int(round(2 * Lx / hx))
    return PhaseGrid(1, nx * hx / 2, nx, nv * hv / 2, nv)


def _rk4_riccati(rho0, times, sub=200):
    out = [rho0]
    r = rho0
    for a, b in zip(times, times[1:]):
        h = (b - a) / sub
        for _ in range(sub):
            f = lambda y: -2 * y * y  # noqa: E731
            k1 = f(r)
            k2 = f(r + h * k1 / 2)
            k3 = f(r + h * k2 / 2)
            k4 = f(r + h * k3)
            r += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        out.append(r)
    return np.array(out)


def test_phase_grid_geometry():
    g = PhaseGrid.for_problem(1.0, 1.0, 256, 256)
    assert g.Lx == pytest.approx(2.0 + 6.0) and g.Lv == pytest.approx(7.0)
    assert g.hx == pytest.approx(16 / 256) and g.hv == pytest.approx(14 / 256)
    assert g.v[0] == pytest.approx(-7 + g.hv / 2)
    assert np.allclose(g.v, -g.v[::-1])
    assert g.shape == (256, 256)
    assert g.leakage_bound(1.0, 1.0) < 1e-6
    x, v = PhaseGrid(2, 1.0, 4, 1.0, 6).mesh()
    assert x.shape == (4, 4, 6, 6, 2)
    with pytest.raises(ValueError):
        PhaseGrid(1, 1.0, 1, 1.0, 4)


def test_from_density_mass_and_support():
    g = PhaseGrid.for_problem(1.0, 1.0, 128, 128)
    f = DensityField.from_density(UniformBall(1), g)
    assert f.mass() == pytest.approx(1.0, abs=5e-3)
    assert np.all(f.values >= 0) and f.values.max() <= 1 / math.pi + 1e-12
    assert f.ledger["initial_mass"] == pytest.approx(f.mass())
    with pytest.raises(ValueError):
        DensityField.from_density(UniformBall(2), g)
    with pytest.raises(ValueError):
        DensityField(g, np.zeros((3, 3)))


def test_transport_zero_velocity_slice_and_mass():
    g = PhaseGrid(1, 2.0, 64, 2.0, 33)  # odd nv: middle node is v = 0
    rng = np.random.default_rng(0)
    f = DensityField(g, rng.random(g.shape))
    out = transport_step(f, 0.137)
    mid = g.nv // 2
    assert g.v[mid] == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(out.values[:, mid], f.values[:, mid], rtol=0, atol=1e-15)
    assert abs(out.mass() - f.mass()) < 1e-12
    with pytest.raises(ValueError):
        transport_step(f, 0.0)


def test_transport_lattice_shift_is_a_permutation():
    g = _lattice_grid(0.25, 0.1, Lx=1.0, Lv=1.0)
    rng = np.random.default_rng(1)
    f = DensityField(g, rng.random(g.shape))
    out = transport_step(f, 0.1)
    for j, v in enumerate(g.v):
        k = int(round(v * 0.1 / g.hx))
        assert np.allclose(out.values[:, j], np.roll(f.values[:, j], k), rtol=0, atol=1e-14)


def test_transport_d2_mass():
    g = PhaseGrid(2, 1.0, 12, 1.0, 6)
    f = DensityField(g, np.random.default_rng(2).random(g.shape))
    assert abs(transport_step(f, 0.3).mass() - f.mass()) < 1e-12


def test_diffusion_spreads_delta_column_with_variance_dt():
    g = PhaseGrid(1, 1.0, 4, 4.0, 401)
    vals = np.zeros(g.shape)
    vals[:, 200] = 1.0
    f = DensityField(g, vals)
    dt = (4 * g.hv) ** 2
    out = diffusion_step(f, dt)
    w = out.values[0] / out.values[0].sum()
    mean = np.sum(w * g.v)
    assert np.sum(w * (g.v - mean) ** 2) == pytest.approx(dt, rel=0.02)


def test_diffusion_mass_ledger_and_semigroup():
    g = PhaseGrid(1, 2.0, 32, 3.0, 240)
    f = _gauss_field(g, var=0.4, v0=2.0)  # near the v edge, so some mass leaks
    out = diffusion_step(f, 0.5)
    assert out.ledger["leakage"] > 1e-4
    assert abs(f.mass() - out.mass() - out.ledger["leakage"]) < 1e-12
    centred = _gauss_field(g, var=0.2, v0=0.0)
    two = diffusion_step(diffusion_step(centred, 0.05), 0.05)
    one = diffusion_step(centred, 0.1)
    assert np.max(np.abs(two.values - one.values)) < 1e-8 * centred.values.max()


def test_diffusion_warns_when_under_resolved():
    g = PhaseGrid(1, 1.0, 4, 1.0, 100)
    f = DensityField(g, np.ones(g.shape))
    with pytest.warns(RuntimeWarning):
        diffusion_step(f, 1e-5)
    with pytest.raises(ValueError):
        diffusion_step(f, -1.0)


def test_reaction_step_examples():
    g = PhaseGrid(1, 1.0, 16, 3.0, 64)
    f = DensityField.homogeneous(g, 1.0, lambda v: np.exp(-v[..., 0] ** 2))
    out = reaction_step(f, 0.5)
    assert np.allclose(out.rho(), 0.5, rtol=1e-13)
    assert np.all(out.values <= f.values)
    assert out.ledger["reaction_loss"] == pytest.approx(f.mass() - out.mass())
    vals = f.values.copy()
    vals[:4] = 0.0
    z = reaction_step(DensityField(g, vals), 0.3)
    assert np.array_equal(z.values[:4], vals[:4])
    with pytest.raises(ValueError):
        reaction_step(f, 0.0)


def test_solve_riccati_matches_closed_form_and_rk4():
    g = PhaseGrid(1, 1.0, 8, 8.0, 256)
    f0 = DensityField.homogeneous(g, 1.0, lambda v: np.exp(-v[..., 0] ** 2 / 0.5))
    traj = solve(f0, 2.0, 0.05)
    rho = np.array([f.rho().mean() for f in traj.fields])
    exact = 1.0 / (1.0 + 2.0 * traj.times)
    assert np.max(np.abs(rho / exact - 1)) < 5e-3
    assert np.allclose(_rk4_riccati(1.0, traj.times), exact, rtol=1e-9)


def test_solve_free_matches_free_density():
    f0 = UniformBall(1)
    g = PhaseGrid.for_problem(1.0, 0.5, 128, 128)
    traj = solve(DensityField.from_density(f0, g), 0.5, 0.1, sink=False)
    x, v = g.mesh()
    p = free_density(0.5, x[..., 0], v[..., 0], f0)
    assert np.abs(traj.final.values - p).sum() * g.cell_volume < 0.015


def test_solve_invariants():
    f0 = UniformBall(1)
    g = PhaseGrid.for_problem(1.0, 0.5, 96, 96)
    traj = solve(DensityField.from_density(f0, g), 0.5, 0.05, observe_every=2)
    masses = np.array([r[1] for r in traj.ledger_rows])
    assert np.all(np.diff(masses) <= 1e-15)
    assert len(traj.ledger_rows) == 11 and len(traj.fields) == 6
    for f in traj.fields:
        assert np.all(f.values >= 0)
        assert f.ledger_residual() < 1e-10
    # domination by the free density
    x, v = g.mesh()
    p = free_density(0.5, x[..., 0], v[..., 0], f0)
    assert np.all(traj.final.values <= p + 0.01)
    assert traj.final.mass() < 0.75


def test_solve_errors():
    g = PhaseGrid(1, 2.0, 32, 1.5, 32)
    f = _gauss_field(g, var=0.3)
    with pytest.raises(LeakageError):
        solve(f, 0.5, 0.1)
    with pytest.raises(ValueError):
        solve(f, 0.55, 0.1)
    with pytest.raises(ValueError):
        solve(f, 0.0, 0.1)


def test_strang_dt_refinement_is_second_order():
    dt_ref = 0.02
    g = _lattice_grid(0.05, dt_ref, Lx=3.0, Lv=5.0)
    f0 = _gauss_field(g, mass=2.0, var=0.09, v0=0.0)
    ref = solve(f0, 0.64, dt_ref, observe_every=10**6).final
    errs = [solve(f0, 0.64, dt, observe_every=10**6).final.l1(ref) for dt in (0.32, 0.16, 0.08)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    assert all(3.3 < r < 5.0 for r in ratios), ratios


def test_weak_residual_zero_field_and_convergence():
    phi = family_member(1)
    g = PhaseGrid(1, 4.0, 16, 5.0, 40)
    zero = solve(DensityField(g, np.zeros(g.shape)), 0.4, 0.2)
    assert weak_residual(zero, phi) == 0.0
    res = []
    for hv, dt in ((0.2, 0.1), (0.1, 0.05)):
        g = _lattice_grid(hv, dt)
        res.append(abs(weak_residual(solve(_gauss_field(g), 0.5, dt), phi)))
    assert res[1] < res[0] / 3


def test_sink_integral_matches_direct_triple_sum():
    g = PhaseGrid(1, 2.0, 12, 2.0, 10)
    f = DensityField(g, np.random.default_rng(3).random(g.shape))
    phi = family_member(2)
    x, v = g.mesh()
    ph = phi(x, v)
    direct = 0.0
    for i in range(g.nx):
        for j in range(g.nv):
            for k in range(g.nv):
                direct += ph[i, j] * f.values[i, j] * f.values[i, k]
    direct *= 2 * g.hx * g.hv * g.hv
    assert sink_integral(f, phi) == pytest.approx(direct, rel=1e-12)


def test_l1_contraction_random_pairs():
    g = PhaseGrid(1, 2.0, 40, 3.0, 40)
    rng = np.random.default_rng(4)
    f = DensityField(g, rng.random(g.shape))
    ok, margin = l1_contraction_check(f, f.copy(), 0.1)
    assert ok and margin == 0.0
    for _ in range(10):
        a = DensityField(g, rng.random(g.shape))
        b = DensityField(g, rng.random(g.shape))
        ok, margin = l1_contraction_check(a, b, float(rng.uniform(0.01, 0.3)))
        assert ok, margin
    with pytest.raises(ValueError):
        l1_contraction_check(f, DensityField(PhaseGrid(1, 2.0, 40, 3.0, 41),
                                             np.zeros((40, 41))), 0.1)


def test_gronwall_paired_run():
    g = PhaseGrid.for_problem(1.0, 0.5, 64, 64)
    f0 = DensityField.from_density(UniformBall(1), g)
    g0 = DensityField(g, f0.values * 1.1)
    out = gronwall_paired_run(f0, g0, 0.5, 0.1)
    assert out["passed"]
    assert out["distance"][0] == pytest.approx(0.1 * f0.mass())
    assert out["constant"] > 0 and len(out["times"]) == 6


def test_save_load_and_csv(tmp_path):
    g = PhaseGrid(1, 2.0, 16, 5.0, 12)
    f = _gauss_field(g)
    f.t = 0.25
    f.save(tmp_path / "field")
    back = DensityField.load(tmp_path / "field")
    assert np.array_equal(back.values, f.values) and back.t == 0.25 and back.grid == g
    header = json.loads((tmp_path / "field.json").read_text())
    assert header["shape"] == [16, 12] and header["dtype"] == "<f8"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        traj = solve(f, 0.2, 0.1)
    write_marginals_csv(traj, tmp_path / "rho.csv")
    write_mass_csv(traj, tmp_path / "mass.csv")
    rows = (tmp_path / "rho.csv").read_text().splitlines()
    assert rows[0] == "t,x0,rho" and len(rows) == 1 + 3 * 16
    assert (tmp_path / "mass.csv").read_text().splitlines()[0] == "t,mass,reaction_loss,leakage"
