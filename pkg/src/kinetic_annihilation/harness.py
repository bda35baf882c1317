"""Experiment configuration, orchestration and the command line.

Seed scheme: replicate ``rep`` at size ``N`` runs with the integer seed
``SeedSequence([master_seed, N, rep]).generate_state(1, uint64)[0]``.
Inside a run that seed feeds separate Philox streams for sampling, motion
and annihilation events (see ``particle_sim``).

Every CSV row and JSON artifact carries the configuration hash, a sha256 of
the canonical JSON of the fields that influence results.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import kernels
from .empirical import (EmpiricalMeasure, family_member, identity_residual, pairing_vector,
                        test_family, weak_distance_from_pairings)
from .kinetic_pde import DensityField, PhaseGrid, solve, write_marginals_csv, write_mass_csv
from .model import Mollifier, ScalingRule, UniformBall, epsilon_of
from .particle_sim import (ParticleSystem, StepPlan, run, write_events_csv,
                           write_snapshots_binary, write_snapshots_csv)

__all__ = [
    "ExperimentConfig",
    "ConvergenceReport",
    "AuditReport",
    "replicate_seed",
    "build_initial_density",
    "pde_reference",
    "run_simulate",
    "run_solve_pde",
    "run_compare",
    "run_identity_audit",
    "run_kernel_check",
    "fit_log_slope",
    "max_doubling_ratio",
    "main",
]

MODES = ("simulate", "solve-pde", "compare", "kernel-check", "audit")
# fields that do not change any number the experiment produces
_NON_RESULT_FIELDS = ("out_dir", "workers")


@dataclass
class ExperimentConfig:
    """JSON-serializable experiment description.

    ``grid`` keys: nx, nv (PDE nodes per axis), dt (PDE step), subsample.
    ``f0`` keys: name ("uniform_ball"), r, center (or null).
    ``tolerances`` keys: leak_guard, audit_sigma, confidence,
    ratio_low, ratio_high.
    """

    mode: str = "compare"
    d: int = 1
    n_ladder: list = field(default_factory=lambda: [250, 500, 1000, 2000])
    seeds: int = 64
    master_seed: int = 20261016
    T: float = 1.0
    dt: float = 0.004
    scaling: dict = field(default_factory=lambda: {"mode": "local", "alpha": 1.0})
    mollifier: str = "weighted_bump"
    f0: dict = field(default_factory=lambda: {"name": "uniform_ball", "r": 1.0, "center": None})
    grid: dict = field(default_factory=lambda: {"nx": 384, "nv": 384, "dt": 0.05, "subsample": 4})
    k_max: int = 24
    interacting: bool = True
    test_function: int = 1
    snapshot_format: str = "csv"
    observe_every: int = 25
    out_dir: str = "out"
    workers: int = 1
    tolerances: dict = field(default_factory=lambda: {
        "leak_guard": 1e-6, "audit_sigma": 6.0, "confidence": 0.95,
        "ratio_low": 1.6, "ratio_high": 2.6})

    def __post_init__(self):
        self.n_ladder = [int(n) for n in self.n_ladder]
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not self.n_ladder or min(self.n_ladder) < 1:
            raise ValueError("n_ladder needs positive sizes")
        if self.seeds < 1 or self.workers < 1 or self.k_max < 1 or self.observe_every < 1:
            raise ValueError("seeds, workers, k_max and observe_every must be >= 1")
        if self.T <= 0 or self.dt <= 0:
            raise ValueError("T and dt must be positive")
        if abs(round(self.T / self.dt) * self.dt - self.T) > 1e-9 * self.T:
            raise ValueError("T must be a multiple of dt")
        ScalingRule(self.d, self.scaling.get("mode", "local"), float(self.scaling.get("alpha", 1.0)))
        Mollifier(self.d, self.mollifier)
        if self.f0.get("name") != "uniform_ball" or float(self.f0.get("r", 1.0)) <= 0:
            raise ValueError("f0 must be a uniform_ball with positive r")
        g = self.grid
        if int(g["nx"]) < 2 or int(g["nv"]) < 2 or float(g["dt"]) <= 0:
            raise ValueError("grid needs nx, nv >= 2 and dt > 0")
        if abs(round(self.T / g["dt"]) * g["dt"] - self.T) > 1e-9 * self.T:
            raise ValueError("T must be a multiple of the grid dt")
        if self.snapshot_format not in ("csv", "binary"):
            raise ValueError("snapshot_format is csv or binary")
        if self.test_function < 1:
            raise ValueError("test_function is a 1-based family index")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @property
    def config_hash(self) -> str:
        data = dataclasses.asdict(self)
        for k in _NON_RESULT_FIELDS:
            data.pop(k)
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def replicate_seed(master: int, n: int, rep: int) -> int:
    return int(np.random.SeedSequence([master, n, rep]).generate_state(1, dtype=np.uint64)[0])


def build_initial_density(cfg: ExperimentConfig) -> UniformBall:
    return UniformBall(cfg.d, float(cfg.f0.get("r", 1.0)), cfg.f0.get("center"))


def _system(cfg: ExperimentConfig, n: int, seed: int) -> ParticleSystem:
    rule = ScalingRule(cfg.d, cfg.scaling.get("mode", "local"), float(cfg.scaling.get("alpha", 1.0)))
    return ParticleSystem.from_density(build_initial_density(cfg), n, Mollifier(cfg.d, cfg.mollifier),
                                       epsilon_of(rule, n), seed, interacting=cfg.interacting)


def _map(fn, jobs, workers):
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _jobs(cfg):
    return [(cfg, n, rep, replicate_seed(cfg.master_seed, n, rep))
            for n in cfg.n_ladder for rep in range(cfg.seeds)]


# ---------------------------------------------------------------- PDE side

def pde_reference(cfg: ExperimentConfig):
    f0 = build_initial_density(cfg)
    g = cfg.grid
    grid = PhaseGrid.for_problem(f0.radius, cfg.T, int(g["nx"]), int(g["nv"]), cfg.d)
    field0 = DensityField.from_density(f0, grid, int(g.get("subsample", 4)))
    every = max(1, int(round(0.1 / float(g["dt"]))))
    return solve(field0, cfg.T, float(g["dt"]), observe_every=every, sink=cfg.interacting,
                 leak_guard=float(cfg.tolerances.get("leak_guard", 1e-6)))


# ---------------------------------------------------------------- reports

def fit_log_slope(ns, means):
    """Least-squares slope of log(mean) against log(N)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(means, float)), 1)[0])


@dataclass
class ConvergenceReport:
    config_hash: str
    rows: list  # dicts: N, rep, seed, weak_distance, mass_T, events, gaps (list)
    confidence: float = 0.95
    bootstrap_seed: int = 0
    n_bootstrap: int = 2000
    partial: bool = False

    def __post_init__(self):
        self._aggregate()

    def _aggregate(self):
        ns = sorted({r["N"] for r in self.rows})
        self.ladder = ns
        self.by_n = {n: np.array([r["weak_distance"] for r in self.rows if r["N"] == n]) for n in ns}
        self.mean = {n: float(v.mean()) for n, v in self.by_n.items()}
        self.stderr = {n: float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.nan
                       for n, v in self.by_n.items()}
        self.mass = {n: float(np.mean([r["mass_T"] for r in self.rows if r["N"] == n])) for n in ns}
        if len(ns) >= 2 and all(v > 0 for v in self.mean.values()):
            self.slope = fit_log_slope(ns, [self.mean[n] for n in ns])
            rng = np.random.default_rng(self.bootstrap_seed)
            boots = []
            for _ in range(self.n_bootstrap):
                m = [self.by_n[n][rng.integers(0, len(self.by_n[n]), len(self.by_n[n]))].mean() for n in ns]
                boots.append(fit_log_slope(ns, m))
            a = (1 - self.confidence) / 2
            self.slope_ci = (float(np.quantile(boots, a)), float(np.quantile(boots, 1 - a)))
        else:
            self.slope, self.slope_ci = math.nan, (math.nan, math.nan)

    @property
    def strictly_decreasing(self) -> bool:
        m = [self.mean[n] for n in self.ladder]
        return all(b < a for a, b in zip(m, m[1:]))

    @property
    def slope_negative(self) -> bool:
        return self.slope_ci[1] < 0

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "partial": self.partial,
            "ladder": self.ladder,
            "mean_weak_distance": {str(n): self.mean[n] for n in self.ladder},
            "stderr": {str(n): self.stderr[n] for n in self.ladder},
            "mean_mass_T": {str(n): self.mass[n] for n in self.ladder},
            "slope": self.slope,
            "slope_ci": list(self.slope_ci),
            "confidence": self.confidence,
            "strictly_decreasing": self.strictly_decreasing,
            "slope_negative": self.slope_negative,
        }

    def write_csv(self, path) -> None:
        k = max((len(r["gaps"]) for r in self.rows), default=0)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", "N", "rep", "seed", "weak_distance", "mass_T", "events"]
                       + [f"gap_{i + 1}" for i in range(k)])
            for r in self.rows:
                w.writerow([self.config_hash, r["N"], r["rep"], r["seed"], repr(r["weak_distance"]),
                            repr(r["mass_T"]), r["events"], *map(repr, r["gaps"])])

    @classmethod
    def from_csv(cls, path, **kw) -> "ConvergenceReport":
        rows, h = [], None
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                h = rec["config_hash"]
                gaps = [float(v) for key, v in rec.items() if key.startswith("gap_")]
                rows.append({"N": int(rec["N"]), "rep": int(rec["rep"]), "seed": int(rec["seed"]),
                             "weak_distance": float(rec["weak_distance"]),
                             "mass_T": float(rec["mass_T"]), "events": int(rec["events"]),
                             "gaps": gaps})
        return cls(h, rows, **kw)


@dataclass
class AuditReport:
    config_hash: str
    rows: list  # dicts: N, rep, seed, residual
    sigma_flag: float = 6.0
    ratio_band: tuple = (1.6, 2.6)

    def __post_init__(self):
        ns = sorted({r["N"] for r in self.rows})
        self.ladder = ns
        self.by_n = {n: np.array([r["residual"] for r in self.rows if r["N"] == n]) for n in ns}
        self.mean = {n: float(v.mean()) for n, v in self.by_n.items()}
        self.var = {n: float(v.var(ddof=1)) if len(v) > 1 else math.nan for n, v in self.by_n.items()}
        self.stderr = {n: math.sqrt(self.var[n] / len(self.by_n[n])) for n in ns}
        self.ratios = [self.var[a] / self.var[b] for a, b in zip(ns, ns[1:])]
        self.flagged = [r for r in self.rows
                        if abs(r["residual"] - self.mean[r["N"]]) > self.sigma_flag * math.sqrt(self.var[r["N"]])]

    @property
    def ratios_ok(self) -> bool:
        lo, hi = self.ratio_band
        return all(lo <= r <= hi for r in self.ratios)

    @property
    def means_ok(self) -> bool:
        return all(abs(self.mean[n]) <= 3 * self.stderr[n] for n in self.ladder)

    def summary(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "ladder": self.ladder,
            "mean": {str(n): self.mean[n] for n in self.ladder},
            "stderr": {str(n): self.stderr[n] for n in self.ladder},
            "variance": {str(n): self.var[n] for n in self.ladder},
            "variance_ratios": self.ratios,
            "ratio_band": list(self.ratio_band),
            "ratios_ok": self.ratios_ok,
            "means_ok": self.means_ok,
            "flagged_runs": [(r["N"], r["rep"]) for r in self.flagged],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", "N", "rep", "seed", "residual", "flagged"])
            flagged = {(r["N"], r["rep"]) for r in self.flagged}
            for r in self.rows:
                w.writerow([self.config_hash, r["N"], r["rep"], r["seed"], repr(r["residual"]),
                            int((r["N"], r["rep"]) in flagged)])


# ---------------------------------------------------------------- replicas

def _mass_rows(traj, every):
    n0 = traj.n0
    return [(s.t, len(s.ids) / n0) for k, s in enumerate(traj.snapshots) if k % every == 0
            or k == len(traj.snapshots) - 1]


def _compare_replica(job):
    cfg, n, rep, seed, path_refs = job
    sysm = _system(cfg, n, seed)
    traj = run(sysm, cfg.T, StepPlan(cfg.dt, observe_every=cfg.observe_every))
    traj.check_bookkeeping()
    family = test_family(cfg.k_max, cfg.d)
    path = []
    for snap in traj.snapshots[:-1]:
        ref = _match_time(path_refs, snap.t)
        if ref is not None:
            pv = pairing_vector(EmpiricalMeasure(snap.x, snap.v, n), cfg.k_max, family=family)
            path.append((snap.t, weak_distance_from_pairings(pv, ref)))
    last = traj.snapshots[-1]
    mu = EmpiricalMeasure(last.x, last.v, n)
    final_ref = path_refs[-1][1]
    pv = pairing_vector(mu, cfg.k_max, family=family)
    dist = weak_distance_from_pairings(pv, final_ref)
    path.append((last.t, dist))
    return {"N": n, "rep": rep, "seed": seed, "weak_distance": dist,
            "mass_T": mu.mass, "events": len(traj.events),
            "gaps": np.abs(pv - final_ref).tolist(),
            "_mass": _mass_rows(traj, 1), "_path": path}


def _match_time(refs, t):
    for tr, vec in refs:
        if abs(tr - t) <= 1e-9 * max(1.0, abs(t)):
            return vec
    return None


def _audit_replica(job):
    cfg, n, rep, seed = job
    sysm = _system(cfg, n, seed)
    traj = run(sysm, cfg.T, StepPlan(cfg.dt, observe_every=1))
    traj.check_bookkeeping()
    return {"N": n, "rep": rep, "seed": seed,
            "residual": identity_residual(traj, family_member(cfg.test_function, cfg.d))}


def _simulate_replica(job):
    cfg, n, rep, seed = job
    sysm = _system(cfg, n, seed)
    traj = run(sysm, cfg.T, StepPlan(cfg.dt, observe_every=cfg.observe_every))
    traj.check_bookkeeping()
    return n, rep, seed, traj


# ---------------------------------------------------------------- operations

def _out(cfg, out_dir):
    path = Path(out_dir if out_dir is not None else cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=float))


def _write_mass(path, cfg, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "N", "rep", "seed", "t", "alive_fraction"])
        for n, rep, seed, series in rows:
            for t, m in series:
                w.writerow([cfg.config_hash, n, rep, seed, repr(float(t)), repr(float(m))])


def run_compare(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> ConvergenceReport:
    """Weak distance between mu_T^N and the PDE solution for every (N, replicate)."""
    start = time.time()
    ref_traj = pde_reference(cfg)
    family = test_family(cfg.k_max, cfg.d)
    path_refs = [(f.t, pairing_vector(f, cfg.k_max, family=family)) for f in ref_traj.fields]
    reference = path_refs[-1][1]
    jobs = [(c, n, rep, seed, path_refs) for c, n, rep, seed in _jobs(cfg)]
    results, partial = [], False
    try:
        for n in cfg.n_ladder:
            results += _map(_compare_replica, [j for j in jobs if j[1] == n], cfg.workers)
    except BaseException:
        partial = True
        raise
    finally:
        rows = [{k: v for k, v in r.items() if not k.startswith("_")} for r in results]
        report = ConvergenceReport(cfg.config_hash, rows,
                                   float(cfg.tolerances.get("confidence", 0.95)), cfg.master_seed,
                                   partial=partial) if rows else None
        if write and report is not None:
            out = _out(cfg, out_dir)
            report.write_csv(out / "distances.csv")
            _write_mass(out / "mass.csv", cfg,
                        [(r["N"], r["rep"], r["seed"], r["_mass"]) for r in results])
            with open(out / "path_distances.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["config_hash", "N", "rep", "seed", "t", "weak_distance"])
                for r in results:
                    for t, dist in r["_path"]:
                        w.writerow([cfg.config_hash, r["N"], r["rep"], r["seed"], repr(float(t)),
                                    repr(float(dist))])
            summary = report.summary()
            summary.update({"pde_mass_T": ref_traj.final.mass(), "pde_pairings": reference.tolist(),
                            "elapsed_s": time.time() - start, "config": json.loads(cfg.to_json())})
            _write_json(out / "report.json", summary)
    return report


def run_identity_audit(cfg: ExperimentConfig, out_dir=None, write: bool = True) -> AuditReport:
    """Martingale residual of <phi, mu^N> per run; statistics across seeds."""
    start = time.time()
    rows = []
    for n in cfg.n_ladder:
        rows += _map(_audit_replica, [j for j in _jobs(cfg) if j[1] == n], cfg.workers)
    tol = cfg.tolerances
    report = AuditReport(cfg.config_hash, rows, float(tol.get("audit_sigma", 6.0)),
                         (float(tol.get("ratio_low", 1.6)), float(tol.get("ratio_high", 2.6))))
    if write:
        out = _out(cfg, out_dir)
        report.write_csv(out / "audit.csv")
        summary = report.summary()
        summary.update({"elapsed_s": time.time() - start, "config": json.loads(cfg.to_json())})
        _write_json(out / "report.json", summary)
    return report


def run_simulate(cfg: ExperimentConfig, out_dir=None) -> dict:
    out = _out(cfg, out_dir)
    results = _map(_simulate_replica, _jobs(cfg), cfg.workers)
    events_path = out / "events.csv"
    with open(events_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", "N", "rep", "seed", "t", "i", "j"])
        for n, rep, seed, traj in results:
            for t, i, j in traj.events:
                w.writerow([cfg.config_hash, n, rep, seed, repr(float(t)), int(i), int(j)])
    _write_mass(out / "mass.csv", cfg, [(n, rep, seed, _mass_rows(traj, 1)) for n, rep, seed, traj in results])
    snap_dir = out / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    for n, rep, seed, traj in results:
        stem = snap_dir / f"N{n}_rep{rep}"
        if cfg.snapshot_format == "csv":
            write_snapshots_csv(traj, stem.with_suffix(".csv"))
            write_events_csv(traj, snap_dir / f"N{n}_rep{rep}_events.csv")
        else:
            write_snapshots_binary(traj, stem.with_suffix(".npy"))
    summary = {"config_hash": cfg.config_hash, "config": json.loads(cfg.to_json()),
               "runs": [{"N": n, "rep": rep, "seed": seed, "events": len(traj.events),
                         "alive_T": int(traj.alive_counts[-1])} for n, rep, seed, traj in results]}
    _write_json(out / "report.json", summary)
    return summary


def run_solve_pde(cfg: ExperimentConfig, out_dir=None) -> dict:
    out = _out(cfg, out_dir)
    traj = pde_reference(cfg)
    field_dir = out / "fields"
    field_dir.mkdir(exist_ok=True)
    for k, f in enumerate(traj.fields):
        f.save(field_dir / f"field_{k:04d}")
    write_marginals_csv(traj, out / "marginals.csv")
    write_mass_csv(traj, out / "mass.csv")
    final = traj.final
    summary = {"config_hash": cfg.config_hash, "config": json.loads(cfg.to_json()),
               "times": traj.times.tolist(), "mass_T": final.mass(), "ledger": final.ledger,
               "ledger_residual": final.ledger_residual()}
    _write_json(out / "report.json", summary)
    return summary


def run_kernel_check(cfg: ExperimentConfig, out_dir=None, shells: bool = True) -> list:
    """Table of kernel diagnostics: (check, params, value, threshold, passed)."""
    rows = []
    for d, t in ((1, 0.5), (1, 1.0), (2, 1.0)):
        for name, a in (("normalization_P", kernels.HYPOELLIPTIC_DIFFUSION),
                        ("normalization_Pstar", kernels.GENERATOR_DIFFUSION)):
            r = kernels.normalization_residual(t, a, d, x=np.full(d, 0.3), v=np.full(d, -0.7))
            rows.append((name, f"d={d};t={t}", r, 1e-6, r <= 1e-6))
    rng = np.random.default_rng(cfg.master_seed)
    ck = max(kernels.chapman_kolmogorov_residual(0.5, 0.5, *rng.normal(size=4)) for _ in range(20))
    rows.append(("chapman_kolmogorov_Pstar", "s=t=0.5;pairs=20", ck, 1e-4, ck <= 1e-4))
    f0 = UniformBall(1, 1.0)
    t = rng.uniform(0.01, cfg.T, 1000)
    x = rng.uniform(-4, 4, 1000)
    v = rng.uniform(-4, 4, 1000)
    p = np.array([f0.free_density(ti, xi, vi) for ti, xi, vi in zip(t, x, v)])
    rows.append(("density_bound_margin", "points=1000", float(f0.gamma - p.max()), 0.0, p.max() <= f0.gamma))
    c = kernels.exp_decay_constant(f0.gamma, f0.radius, cfg.T, 1)
    ladder = c * np.array([1.0, 1.25, 1.5, 2.0])
    worst = -math.inf
    for vv in ladder:
        for tt in (0.25 * cfg.T, 0.5 * cfg.T, cfg.T):
            xs = np.linspace(-3.0, tt * vv + 3.0, 401)
            pv = f0.free_density(tt, xs, np.full_like(xs, vv))
            env = kernels.exp_decay_envelope(vv, f0.gamma, f0.radius, cfg.T, 1)
            worst = max(worst, float(pv.max() - env))
    rows.append(("exp_decay_margin", f"C={c:g}", -worst, 0.0, worst <= 0))
    if shells:
        _, partial = kernels.green_shell_sums(0.0, 0.5)
        for k, s in enumerate(partial):
            rows.append(("green_shell_partial_sum", f"X=(0,0.5);shell={k}", float(s), math.nan, True))
        cauchy = abs(partial[12] - partial[11]) / abs(partial[12])
        rows.append(("green_shell_cauchy", "shell=12", cauchy, 0.01, cauchy <= 0.01))
    worst_ratio = max_doubling_ratio(10_000, seed=1)
    rows.append(("volume_doubling_max_ratio", "points=10000;exact", float(worst_ratio), 16.0,
                 worst_ratio <= 16))
    if out_dir is not None or cfg.out_dir:
        out = _out(cfg, out_dir)
        with open(out / "kernel_table.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", "check", "params", "value", "threshold", "passed"])
            for r in rows:
                w.writerow([cfg.config_hash, r[0], r[1], repr(float(r[2])), repr(float(r[3])), int(bool(r[4]))])
        _write_json(out / "report.json", {
            "config_hash": cfg.config_hash, "config": json.loads(cfg.to_json()),
            "checks": [{"check": r[0], "params": r[1], "value": float(r[2]),
                        "threshold": float(r[3]), "passed": bool(r[4])} for r in rows]})
    return rows


def max_doubling_ratio(n_points: int, d: int = 1, seed: int = 1) -> Fraction:
    """Largest Lambda(X, 2 delta) / Lambda(X, delta) over a random (v, delta) sweep,
    evaluated in exact rational arithmetic (floats are converted exactly)."""
    rng = np.random.default_rng(seed)
    vs = rng.normal(size=(n_points, d)) * 10
    deltas = 10 ** rng.uniform(-3, 2, n_points)
    return max(kernels.volume_doubling_ratio([Fraction(float(c)) for c in v], Fraction(float(dl)), d)
               for v, dl in zip(vs, deltas))


# ---------------------------------------------------------------- CLI

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kinetic-annihilation",
                                description="Annihilating kinetic particles: simulation, PDE and checks")
    sub = p.add_subparsers(dest="command", required=True)
    for name in MODES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file (defaults are used when omitted)")
        s.add_argument("--out", help="output directory (overrides out_dir)")
        s.add_argument("--seeds", type=int, help="replicates per N (overrides seeds)")
        s.add_argument("--workers", type=int, help="worker processes (overrides workers)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {"mode": args.command}
    if args.seeds is not None:
        over["seeds"] = args.seeds
    if args.workers is not None:
        over["workers"] = args.workers
    if args.out is not None:
        over["out_dir"] = args.out
    cfg = cfg.replace(**over)
    out = _out(cfg, None)
    cfg.save(out / "config.json")
    if cfg.mode == "compare":
        rep = run_compare(cfg)
        s = rep.summary()
        print(f"slope {s['slope']:.3f} CI {s['slope_ci'][0]:.3f}..{s['slope_ci'][1]:.3f}; "
              f"strictly decreasing: {s['strictly_decreasing']}")
        ok = rep.strictly_decreasing and rep.slope_negative
    elif cfg.mode == "audit":
        rep = run_identity_audit(cfg)
        print("variance ratios", " ".join(f"{r:.3f}" for r in rep.ratios))
        ok = rep.ratios_ok and rep.means_ok
    elif cfg.mode == "simulate":
        s = run_simulate(cfg)
        print(f"{len(s['runs'])} runs written to {out}")
        ok = True
    elif cfg.mode == "solve-pde":
        s = run_solve_pde(cfg)
        print(f"mass at T: {s['mass_T']:.6f}; ledger residual {s['ledger_residual']:.2e}")
        ok = True
    else:
        rows = run_kernel_check(cfg)
        for r in rows:
            print(f"{r[0]:28s} {r[1]:24s} {float(r[2]):.6g} {'ok' if r[4] else 'FAIL'}")
        ok = all(bool(r[4]) for r in rows)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
