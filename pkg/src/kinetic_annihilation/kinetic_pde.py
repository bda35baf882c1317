"""Grid solver for  df/dt = -v.grad_x f + 1/2 Lap_v f - 2 f rho,  rho = int f dv.

Symmetric (Strang) splitting with exact or exactly-normalized substeps:

    R(dt/2) D(dt/2) T(dt) D(dt/2) R(dt/2)

T is a semi-Lagrangian shift with linear interpolation, periodic in x.  D is
a convolution in v with the sampled Gaussian of variance dt, truncated at six
standard deviations and zero-padded at the v boundary (the lost mass is
booked as leakage).  R is the closed-form solution f / (1 + 2 rho dt) of the
reaction ODE at frozen x.

Velocity nodes are cell centred, so the trapezoid rule for rho reduces to
h_v^d times the node sum.  Field values shape: (nx,)*d + (nv,)*d.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import integrate, ndimage, special

from .model import InitialDensity

__all__ = [
    "PhaseGrid",
    "DensityField",
    "PDETrajectory",
    "LeakageError",
    "transport_step",
    "diffusion_step",
    "reaction_step",
    "solve",
    "weak_residual",
    "sink_integral",
    "l1_contraction_check",
    "gronwall_paired_run",
    "write_marginals_csv",
    "write_mass_csv",
]


class LeakageError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhaseGrid:
    """Periodic x box [-Lx, Lx)^d with nx nodes per axis; v box [-Lv, Lv]^d
    split into nv cells per axis with nodes at the cell centres."""

    d: int
    Lx: float
    nx: int
    Lv: float
    nv: int

    def __post_init__(self):
        if self.d < 1 or self.nx < 2 or self.nv < 2 or self.Lx <= 0 or self.Lv <= 0:
            raise ValueError("invalid grid parameters")

    @classmethod
    def for_problem(cls, R: float, T: float, nx: int, nv: int, d: int = 1) -> "PhaseGrid":
        """Box wide enough that wrap-around and v-leakage are negligible up to T."""
        Lx = R * (1 + T) + 6 * T**1.5
        Lv = R + 6 * math.sqrt(T)
        return cls(d, Lx, nx, Lv, nv)

    @property
    def hx(self) -> float:
        return 2 * self.Lx / self.nx

    @property
    def hv(self) -> float:
        return 2 * self.Lv / self.nv

    @property
    def x(self) -> np.ndarray:
        return -self.Lx + self.hx * np.arange(self.nx)

    @property
    def v(self) -> np.ndarray:
        return -self.Lv + self.hv * (np.arange(self.nv) + 0.5)

    @property
    def shape(self) -> tuple:
        return (self.nx,) * self.d + (self.nv,) * self.d

    @property
    def cell_volume(self) -> float:
        return (self.hx * self.hv) ** self.d

    def leakage_bound(self, R: float, T: float) -> float:
        """Gaussian tail estimate of the v-mass that leaves the box by time T."""
        return 2 * self.d * special.ndtr(-(self.Lv - R) / math.sqrt(T))

    def mesh(self):
        """(x, v) node arrays of shape grid.shape + (d,)."""
        axes = [self.x] * self.d + [self.v] * self.d
        m = np.meshgrid(*axes, indexing="ij")
        return np.stack(m[: self.d], -1), np.stack(m[self.d :], -1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DensityField:
    grid: PhaseGrid
    values: np.ndarray
    t: float = 0.0
    ledger: dict = field(default_factory=lambda: {"initial_mass": None, "reaction_loss": 0.0,
                                                   "leakage": 0.0})

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} != grid {self.grid.shape}")
        if self.ledger.get("initial_mass") is None:
            self.ledger["initial_mass"] = self.mass()

    @classmethod
    def from_density(cls, f0: InitialDensity, grid: PhaseGrid, subsample: int = 4) -> "DensityField":
        """Cell averages of f0 estimated with subsample^(2d) midpoints per cell."""
        if f0.d != grid.d:
            raise ValueError("dimension mismatch")
        off = (np.arange(subsample) + 0.5) / subsample - 0.5
        xs = (grid.x[:, None] + grid.hx * off).ravel()
        vs = (grid.v[:, None] + grid.hv * off).ravel()
        d = grid.d
        m = np.meshgrid(*([xs] * d + [vs] * d), indexing="ij")
        fine = np.asarray(f0(np.stack(m[:d], -1), np.stack(m[d:], -1)), dtype=float)
        shape = []
        for n in grid.shape:
            shape += [n, subsample]
        fine = fine.reshape(shape)
        vals = fine.mean(axis=tuple(range(1, 2 * len(grid.shape), 2)))
        return cls(grid, vals)

    @classmethod
    def homogeneous(cls, grid: PhaseGrid, rho0: float, v_profile) -> "DensityField":
        """f(x, v) = rho0 g(v) with g normalized on the grid (x-independent data)."""
        _, v = grid.mesh()
        g = np.asarray(v_profile(v), dtype=float)
        norm = g.sum(axis=tuple(range(grid.d, 2 * grid.d)), keepdims=True) * grid.hv**grid.d
        return cls(grid, rho0 * g / norm)

    def copy(self) -> "DensityField":
        return DensityField(self.grid, self.values.copy(), self.t, dict(self.ledger))

    def mass(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def rho(self) -> np.ndarray:
        """x-marginal (shape (nx,)*d)."""
        g = self.grid
        return self.values.sum(axis=tuple(range(g.d, 2 * g.d))) * g.hv**g.d

    def l1(self, other: "DensityField") -> float:
        return float(np.abs(self.values - other.values).sum() * self.grid.cell_volume)

    def quadrature_points(self):
        x, v = self.grid.mesh()
        d = self.grid.d
        return (x.reshape(-1, d), v.reshape(-1, d),
                np.full(self.values.size, self.grid.cell_volume) * self.values.ravel())

    def ledger_residual(self) -> float:
        L = self.ledger
        return abs(L["initial_mass"] - self.mass() - L["reaction_loss"] - L["leakage"])

    # serialization: flat float64 array plus a JSON header
    def save(self, stem) -> None:
        stem = Path(stem)
        header = {"grid": self.grid.to_dict(), "t": self.t, "ledger": self.ledger,
                  "dtype": "<f8", "shape": list(self.values.shape), "order": "C"}
        stem.with_suffix(".json").write_text(json.dumps(header, indent=1, sort_keys=True))
        self.values.astype("<f8").tofile(stem.with_suffix(".bin"))

    @classmethod
    def load(cls, stem) -> "DensityField":
        stem = Path(stem)
        header = json.loads(stem.with_suffix(".json").read_text())
        vals = np.fromfile(stem.with_suffix(".bin"), dtype=header["dtype"]).reshape(header["shape"])
        return cls(PhaseGrid(**header["grid"]), vals, header["t"], header["ledger"])


def transport_step(f: DensityField, dt: float) -> DensityField:
    """f(x, v) <- f(x - v dt, v), linear interpolation, periodic in x."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    g = f.grid
    out = f.values
    ix = np.arange(g.nx)
    for a in range(g.d):
        s = g.v * dt / g.hx
        m = np.floor(s).astype(np.int64)
        alpha = s - m
        # index arrays live on the (x_a, v_a) plane and broadcast over other axes
        idx_shape = [1] * (2 * g.d)
        idx_shape[a], idx_shape[g.d + a] = g.nx, g.nv
        v_shape = [1] * (2 * g.d)
        v_shape[g.d + a] = g.nv
        i0 = np.broadcast_to(((ix[:, None] - m) % g.nx).reshape(idx_shape), out.shape)
        i1 = np.broadcast_to(((ix[:, None] - m - 1) % g.nx).reshape(idx_shape), out.shape)
        al = alpha.reshape(v_shape)
        out = (1 - al) * np.take_along_axis(out, i0, axis=a) + al * np.take_along_axis(out, i1, axis=a)
    return DensityField(g, out, f.t, dict(f.ledger))


def _heat_kernel(variance: float, h: float) -> np.ndarray:
    sigma = math.sqrt(variance)
    half = int(math.floor(6 * sigma / h))
    m = np.arange(-half, half + 1) * h
    k = np.exp(-0.5 * m * m / variance)
    return k / k.sum()


def diffusion_step(f: DensityField, dt: float) -> DensityField:
    """Convolve in each v axis with the sampled N(0, dt) kernel; book boundary loss."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    g = f.grid
    if math.sqrt(dt) < g.hv:
        warnings.warn(f"sqrt(dt)={math.sqrt(dt):.3g} is below h_v={g.hv:.3g}; kernel under-resolved",
                      RuntimeWarning)
    k = _heat_kernel(dt, g.hv)
    before = f.mass()
    out = f.values
    for a in range(g.d):
        out = ndimage.convolve1d(out, k, axis=g.d + a, mode="constant", cval=0.0)
    res = DensityField(g, out, f.t, dict(f.ledger))
    res.ledger["leakage"] += before - res.mass()
    return res


def reaction_step(f: DensityField, dt: float, coefficient: float = 2.0) -> DensityField:
    """f <- f / (1 + coefficient rho(x) dt), the exact solution of f' = -c rho f at fixed x."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    g = f.grid
    before = f.mass()
    rho = f.rho()
    scale = 1.0 / (1.0 + coefficient * rho * dt)
    out = f.values * scale.reshape(rho.shape + (1,) * g.d)
    res = DensityField(g, out, f.t, dict(f.ledger))
    res.ledger["reaction_loss"] += before - res.mass()
    return res


@dataclass
class PDETrajectory:
    fields: list
    ledger_rows: list  # (t, mass, reaction_loss, leakage)

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.fields])

    @property
    def final(self) -> DensityField:
        return self.fields[-1]


def solve(f0: DensityField, T: float, dt: float, observe_every: int = 1, sink: bool = True,
          leak_guard: float = 1e-6, coefficient: float = 2.0) -> PDETrajectory:
    """Strang-split integration to T (a whole number of steps of size dt)."""
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a positive multiple of dt")
    f = f0.copy()
    fields = [f.copy()]
    rows = [(f.t, f.mass(), f.ledger["reaction_loss"], f.ledger["leakage"])]
    h = 0.5 * dt
    t0 = f.t
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if math.sqrt(h) >= f.grid.hv else "default")
        for k in range(1, n + 1):
            if sink:
                f = reaction_step(f, h, coefficient)
            f = diffusion_step(f, h)
            f = transport_step(f, dt)
            f = diffusion_step(f, h)
            if sink:
                f = reaction_step(f, h, coefficient)
            f.t = t0 + k * dt
            if f.ledger["leakage"] > leak_guard:
                raise LeakageError(f"v-boundary leakage {f.ledger['leakage']:.3g} exceeds {leak_guard:g}")
            rows.append((f.t, f.mass(), f.ledger["reaction_loss"], f.ledger["leakage"]))
            if k % observe_every == 0 or k == n:
                fields.append(f.copy())
    return PDETrajectory(fields, rows)


def sink_integral(f: DensityField, phi, coefficient: float = 2.0) -> float:
    """coefficient * int int phi(x, v) f(x, v) rho(x) dv dx at one time."""
    g = f.grid
    x, v = g.mesh()
    ph = phi(x, v, f.t)
    rho = f.rho().reshape(f.rho().shape + (1,) * g.d)
    return coefficient * float(np.sum(ph * f.values * rho) * g.cell_volume)


def weak_residual(traj: PDETrajectory, phi, coefficient: float = 2.0) -> float:
    """<phi_T, f_T> - <phi_0, f_0> - int <(d/dt + v.grad_x + 1/2 Lap_v) phi, f> dt
    + coefficient int int int phi f f dv' dv dx dt, with trapezoid quadrature in
    time over the stored fields."""
    if not traj.fields:
        return 0.0
    g = traj.fields[0].grid
    x, v = g.mesh()
    flat_x, flat_v = x.reshape(-1, g.d), v.reshape(-1, g.d)

    def pairing(f, vals):
        return float(np.sum(vals * f.values) * g.cell_volume)

    gen_vals, sink_vals = [], []
    for f in traj.fields:
        gen = np.asarray(phi.generator(flat_x, flat_v, f.t)).reshape(g.shape)
        gen_vals.append(pairing(f, gen))
        sink_vals.append(sink_integral(f, phi, coefficient))
    t = traj.times
    first, last = traj.fields[0], traj.fields[-1]
    end = pairing(last, phi(x, v, last.t)) - pairing(first, phi(x, v, first.t))
    return end - integrate.trapezoid(gen_vals, t) + integrate.trapezoid(sink_vals, t)


def _free_map(f: DensityField, dt: float) -> DensityField:
    return transport_step(diffusion_step(f, dt), dt)


def l1_contraction_check(f: DensityField, g: DensityField, dt: float, rtol: float = 1e-10):
    """Check ||D f - D g||_1 <= ||f - g||_1 (1 + rtol) for D = transport o diffusion.

    Returns (passed, margin) with margin = ||f-g||(1+rtol) - ||Df-Dg||.
    """
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        before = f.l1(g)
        after = _free_map(f, dt).l1(_free_map(g, dt))
    margin = before * (1 + rtol) - after
    return margin >= 0, margin


def gronwall_paired_run(f0: DensityField, g0: DensityField, T: float, dt: float):
    """Solve from both data and compare ||f_t - g_t||_1 with delta0 exp(C t),
    C = 2 max over both runs and all t, x of rho.

    Returns dict with times, distances, bound, constant and the pass flag.
    """
    tf = solve(f0, T, dt)
    tg = solve(g0, T, dt)
    dist = np.array([a.l1(b) for a, b in zip(tf.fields, tg.fields)])
    sup_rho = max(max(float(a.rho().max()) for a in tf.fields),
                  max(float(b.rho().max()) for b in tg.fields))
    C = 2.0 * sup_rho
    times = tf.times
    bound = dist[0] * np.exp(C * times)
    return {"times": times, "distance": dist, "bound": bound, "constant": C,
            "passed": bool(np.all(dist <= bound * (1 + 1e-10)))}


def write_marginals_csv(traj: PDETrajectory, path) -> None:
    """Rows (t, x..., rho) for every stored field."""
    g = traj.fields[0].grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{k}" for k in range(g.d)] + ["rho"])
        xs = np.stack(np.meshgrid(*[g.x] * g.d, indexing="ij"), -1).reshape(-1, g.d)
        for f in traj.fields:
            for xi, r in zip(xs, f.rho().ravel()):
                w.writerow([repr(f.t), *map(repr, xi.tolist()), repr(float(r))])


def write_mass_csv(traj: PDETrajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mass", "reaction_loss", "leakage"])
        for row in traj.ledger_rows:
            w.writerow([repr(float(c)) for c in row])
