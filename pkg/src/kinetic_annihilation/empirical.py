"""Empirical measures, test functions and the weak-topology functionals.

The shipped test family
-----------------------
Each member is a tensor product over the 2d phase coordinates of

    g_n(u) = He_n(2u) * exp(-1/(1-u^2)),   u = (s - c) / w,   |u| < 1,

(probabilists' Hermite polynomial ``He_n``), rescaled so that the product
has sup norm 1.  Only the first position and first velocity coordinate carry
a degree and a centre; other coordinates use degree 0, centre 0.  Members are
listed by level L = 0, 1, 2, ...: level L holds every (centre, degree) pair
with centre (i*spacing, j*spacing) and degrees (n1, n2) such that
max(|i|, |j|, n1 + n2) == L, sorted lexicographically by (n1+n2, n1, i, j).
Polynomials times a bump are dense in the continuous functions on the box,
and the centres eventually cover every compact set, so the sequence
separates finite measures.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import hermite_e

from .model import Mollifier, _as_points
from .particle_sim import CellGrid, Snapshot, Trajectory

__all__ = [
    "EmpiricalMeasure",
    "TestFunction",
    "family_member",
    "test_family",
    "pair",
    "pairing_vector",
    "weak_distance",
    "weak_distance_from_pairings",
    "mollified_nonlinearity",
    "interaction_functional",
    "identity_residual",
    "discrete_compensator",
    "time_integral",
    "velocity_cutoff",
    "with_velocity_cutoff",
    "write_functional_rows",
    "FAMILY_WIDTH",
    "FAMILY_SPACING",
]

FAMILY_WIDTH = 2.5
FAMILY_SPACING = 1.0


@dataclass
class EmpiricalMeasure:
    """(1/n0) times the counting measure on the points (x_i, v_i)."""

    x: np.ndarray
    v: np.ndarray
    n0: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.v = np.asarray(self.v, dtype=float).reshape(self.x.shape)
        if self.n0 < 1 or len(self.x) > self.n0:
            raise ValueError("need 1 <= n0 and at most n0 points")

    @classmethod
    def from_snapshot(cls, snap: Snapshot, n0: int, left_limit: bool = False):
        _, x, v = snap.left_limit() if left_limit else (snap.ids, snap.x, snap.v)
        return cls(x, v, n0)

    @property
    def weight(self) -> float:
        return 1.0 / self.n0

    @property
    def mass(self) -> float:
        return len(self.x) / self.n0

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass
class TestFunction:
    """Smooth compactly supported phi(x, v) or phi(t, x, v).

    ``evaluator(x, v, t)`` takes arrays with a trailing axis of length d.
    ``grad_x``, ``lap_v`` and ``time_derivative`` are optional analytic
    derivatives; missing ones are replaced by central differences.
    """

    evaluator: Callable
    support_radius: float
    sup: float = 1.0
    c1: float = math.inf
    c2: float = math.inf
    grad_x: Optional[Callable] = None
    lap_v: Optional[Callable] = None
    time_derivative: Optional[Callable] = None
    name: str = "phi"
    generator_fn: Optional[Callable] = None  # fused (x, v, t, diffusion) -> generator value

    def __call__(self, x, v, t: float = 0.0):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1) + np.sum(v * v, axis=-1))
        out = np.asarray(self.evaluator(x, v, t), dtype=float)
        return np.where(r < self.support_radius, out, 0.0)

    def generator(self, x, v, t: float = 0.0, diffusion: float = 0.5, h: float = 1e-4):
        """(d/dt + v . grad_x + diffusion * Lap_v) phi at the given points."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.generator_fn is not None:
            return self.generator_fn(x, v, t, diffusion)
        d = x.shape[-1]
        if self.grad_x is not None:
            gx = self.grad_x(x, v, t)
        else:
            gx = np.stack([(self(x + h * e, v, t) - self(x - h * e, v, t)) / (2 * h)
                           for e in np.eye(d)], axis=-1)
        if self.lap_v is not None:
            lv = self.lap_v(x, v, t)
        else:
            c = self(x, v, t)
            lv = sum((self(x, v + h * e, t) - 2 * c + self(x, v - h * e, t)) / h**2 for e in np.eye(d))
        dt = 0.0
        if self.time_derivative is not None:
            dt = self.time_derivative(x, v, t)
        return dt + np.sum(v * gx, axis=-1) + diffusion * lv


def _factor(n: int, u):
    """g_n(u), g_n'(u), g_n''(u) for g_n(u) = He_n(2u) exp(-1/(1-u^2))."""
    u = np.asarray(u, dtype=float)
    inside = np.abs(u) < 1.0
    ui = np.where(inside, u, 0.0)
    s = 1.0 - ui * ui
    b = np.where(inside, np.exp(-1.0 / s), 0.0)
    lb1 = -2.0 * ui / s**2
    lb2 = -2.0 / s**2 - 8.0 * ui * ui / s**3
    if n == 0:
        p0, p1, p2 = 1.0, 0.0, 0.0
    else:
        c0, c1, c2 = _hermite_coeffs(n)
        p0 = hermite_e.hermeval(2 * ui, c0)
        p1 = 2.0 * hermite_e.hermeval(2 * ui, c1)
        p2 = 4.0 * hermite_e.hermeval(2 * ui, c2)
    g0 = p0 * b
    g1 = (p1 + p0 * lb1) * b
    g2 = (p2 + 2 * p1 * lb1 + p0 * (lb1**2 + lb2)) * b
    return g0, g1, g2


@lru_cache(maxsize=None)
def _hermite_coeffs(n: int):
    e = np.eye(n + 1)[n]
    return e, hermite_e.hermeder(e, 1), hermite_e.hermeder(e, 2)


@lru_cache(maxsize=None)
def _factor_sups(n: int):
    u = np.linspace(-1, 1, 20001)
    return tuple(float(np.max(np.abs(g))) for g in _factor(n, u))


def family_member(k: int, d: int = 1, width: float = FAMILY_WIDTH,
                  spacing: float = FAMILY_SPACING) -> TestFunction:
    """The k-th member (k >= 1) of the shipped test family."""
    if k < 1:
        raise ValueError("family index starts at 1")
    (i, j), (n1, n2) = _enumeration(k)
    cx, cv = i * spacing, j * spacing
    s1, s2, s0 = _factor_sups(n1), _factor_sups(n2), _factor_sups(0)
    scale = 1.0 / (s1[0] * s2[0] * s0[0] ** (2 * d - 2))

    def parts(x, v):
        x = _as_points(x, d)
        v = _as_points(v, d)
        ux = (x[..., 0] - cx) / width
        uv = (v[..., 0] - cv) / width
        fx = _factor(n1, ux)
        fv = _factor(n2, uv)
        rest = np.ones(np.broadcast_shapes(ux.shape, uv.shape))
        for a in range(1, d):
            rest = rest * _factor(0, x[..., a] / width)[0] * _factor(0, v[..., a] / width)[0]
        return fx, fv, rest

    def evaluator(x, v, t=0.0):
        fx, fv, rest = parts(x, v)
        return scale * fx[0] * fv[0] * rest

    def grad_x(x, v, t=0.0):
        x = _as_points(x, d)
        v = _as_points(v, d)
        fx, fv, rest = parts(x, v)
        out = np.zeros(np.broadcast_shapes(x.shape, v.shape))
        out[..., 0] = scale * fx[1] / width * fv[0] * rest
        for a in range(1, d):
            g0, g1, _ = _factor(0, x[..., a] / width)
            safe = np.where(g0 > 0, g0, 1.0)
            out[..., a] = np.where(g0 > 0, scale * fx[0] * fv[0] * rest * g1 / (width * safe), 0.0)
        return out

    def lap_v(x, v, t=0.0):
        x = _as_points(x, d)
        v = _as_points(v, d)
        fx, fv, rest = parts(x, v)
        out = scale * fx[0] * fv[2] / width**2 * rest
        for a in range(1, d):
            g0, _, g2 = _factor(0, v[..., a] / width)
            safe = np.where(g0 > 0, g0, 1.0)
            out = out + np.where(g0 > 0, scale * fx[0] * fv[0] * rest * g2 / (width**2 * safe), 0.0)
        return out

    def generator_fn(x, v, t=0.0, diffusion=0.5):
        if d > 1:
            return (np.sum(_as_points(v, d) * grad_x(x, v, t), axis=-1)
                    + diffusion * lap_v(x, v, t))
        fx, fv, _ = parts(x, v)
        vv = _as_points(v, d)[..., 0]
        return scale * (vv * fx[1] * fv[0] / width + diffusion * fx[0] * fv[2] / width**2)

    radius = math.hypot(cx, cv) + width * math.sqrt(2 * d)
    c1 = scale * max(s1[1] * s2[0], s1[0] * s2[1]) / width
    c2 = scale * max(s1[2] * s2[0], s1[1] * s2[1], s1[0] * s2[2]) / width**2
    return TestFunction(evaluator, radius, 1.0, max(1.0, c1), max(1.0, c1, c2),
                        grad_x=grad_x, lap_v=lap_v, generator_fn=generator_fn,
                        name=f"phi{k}[c=({cx:g},{cv:g}),n=({n1},{n2})]")


@lru_cache(maxsize=None)
def _enumeration_table(count: int):
    table = []
    level = 0
    while len(table) < count:
        items = []
        for i, j in itertools.product(range(-level, level + 1), repeat=2):
            for n1 in range(level + 1):
                for n2 in range(level + 1 - n1):
                    if max(abs(i), abs(j), n1 + n2) == level:
                        items.append((n1 + n2, n1, i, j, n2))
        for _, n1, i, j, n2 in sorted(items):
            table.append(((i, j), (n1, n2)))
        level += 1
    return tuple(table)


def _enumeration(k: int):
    size = 64
    while size < k:
        size *= 2
    return _enumeration_table(size)[k - 1]


def test_family(k_max: int = 24, d: int = 1) -> list:
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    return [family_member(k, d) for k in range(1, k_max + 1)]


test_family.__test__ = False  # keep pytest from collecting it
TestFunction.__test__ = False


def _points_and_weights(m):
    """Return (x, v, weights) for an EmpiricalMeasure or a DensityField."""
    if isinstance(m, EmpiricalMeasure):
        return m.x, m.v, np.full(len(m.x), m.weight)
    if hasattr(m, "quadrature_points"):
        return m.quadrature_points()
    raise TypeError(f"cannot pair with {type(m).__name__}")


def pair(mu, phi: TestFunction, t: float = 0.0) -> float:
    """<phi_t, mu>: (1/N) sum over alive particles, or a grid integral for a field."""
    x, v, w = _points_and_weights(mu)
    if not len(x):
        return 0.0
    return float(np.dot(w, phi(x, v, t)))


def pairing_vector(mu, k_max: int = 24, t: float = 0.0, family=None) -> np.ndarray:
    family = test_family(k_max, _dim(mu)) if family is None else family[:k_max]
    return np.array([pair(mu, phi, t) for phi in family])


def _dim(m) -> int:
    return m.d if isinstance(m, EmpiricalMeasure) else m.grid.d


def weak_distance_from_pairings(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k = np.arange(1, len(a) + 1)
    return float(np.sum(2.0**-k * np.minimum(np.abs(a - b), 1.0)))


def weak_distance(mu, nu, k_max: int = 24, t: float = 0.0) -> float:
    """sum_{k <= k_max} 2^-k min(|<mu, phi_k> - <nu, phi_k>|, 1)."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    family = test_family(k_max, _dim(mu))
    return weak_distance_from_pairings(pairing_vector(mu, k_max, t, family),
                                       pairing_vector(nu, k_max, t, family))


def mollified_nonlinearity(mu: EmpiricalMeasure, phi: TestFunction, delta: float,
                           t: float = 0.0, eta: Mollifier | None = None) -> float:
    """int dw <eta^d(w-x1) eta^d(w-x2) phi(t,w,v1), mu x mu>, diagonal included.

    Midpoint rule in w with at most delta/8 spacing on the overlap box of the
    two eta^delta supports.
    """
    if not (0.0 < delta <= 1.0):
        raise ValueError("delta must lie in (0, 1]")
    d = mu.d
    eta = Mollifier(d, "bump") if eta is None else eta
    n = len(mu.x)
    if n == 0:
        return 0.0
    ids = np.arange(n)
    i, j, _ = CellGrid(mu.x, ids, 2 * delta).pairs()
    # ordered pairs: both orientations plus the diagonal
    i, j = np.concatenate([i, j, ids]), np.concatenate([j, i, ids])
    lo = np.maximum(mu.x[i], mu.x[j]) - delta
    hi = np.minimum(mu.x[i], mu.x[j]) + delta
    m = 16
    frac = (np.arange(m) + 0.5) / m
    total = 0.0
    for chunk in np.array_split(np.arange(len(i)), max(1, len(i) // 4096)):
        a, b = i[chunk], j[chunk]
        step = (hi[chunk] - lo[chunk]) / m  # (p, d)
        grids = [lo[chunk][:, k, None] + m * step[:, k, None] * frac for k in range(d)]
        mesh = np.stack(np.meshgrid(*[np.arange(m)] * d, indexing="ij"), -1).reshape(-1, d)
        w = np.stack([grids[k][:, mesh[:, k]] for k in range(d)], axis=-1)  # (p, m^d, d)
        vol = np.prod(step, axis=1)
        ka = eta.scaled_radial(np.linalg.norm(w - mu.x[a][:, None, :], axis=-1), delta)
        kb = eta.scaled_radial(np.linalg.norm(w - mu.x[b][:, None, :], axis=-1), delta)
        va = np.broadcast_to(mu.v[a][:, None, :], w.shape)
        vals = ka * kb * phi(w, va, t)
        total += float(np.sum(vol * vals.sum(axis=1)))
    return total / mu.n0**2


def _interaction_sums(x, v, t, n_keep, phi, eps, moll, norm):
    """Interaction density on all points and on the first ``n_keep`` points."""
    n = len(x)
    if n < 2:
        return 0.0, 0.0
    i, j, r = CellGrid(x, np.arange(n), eps).pairs()
    if not len(i):
        return 0.0, 0.0
    # both ordered pairs (i, j) and (j, i)
    terms = moll.scaled_radial(r, eps) * (phi(x[i], v[i], t) + phi(x[j], v[j], t))
    keep = (i < n_keep) & (j < n_keep)
    return float(terms.sum()) / norm, float(terms[keep].sum()) / norm


def time_integral(traj: Trajectory, fn) -> float:
    """Trapezoid rule in time for a functional of the alive configuration.

    The left end of each interval uses the configuration after the previous
    snapshot's annihilations, the right end the one just before this
    snapshot's annihilations, so jumps never leak into the quadrature.

    ``fn(x, v, t, n_keep)`` receives a snapshot's left-limit configuration,
    whose first ``n_keep`` rows are the survivors, and returns the pair
    (value on all rows, value on the survivors).
    """
    total = 0.0
    prev = None
    for k, snap in enumerate(traj.snapshots):
        _, x, v = snap.left_limit()
        right, post = fn(x, v, snap.t, len(snap.ids))
        if k > 0:
            total += 0.5 * (snap.t - traj.snapshots[k - 1].t) * (prev + right)
        prev = post
    return total


def _per_particle(fn, scale):
    def inner(x, v, t, n_keep):
        if not len(x):
            return 0.0, 0.0
        vals = fn(x, v, t)
        return float(vals.sum()) * scale, float(vals[:n_keep].sum()) * scale
    return inner


def interaction_functional(traj: Trajectory, phi: TestFunction, plan_dt: float | None = None) -> float:
    """int (1/N^2) sum_{i != j} theta^eps(x_i - x_j) phi(t, x_i, v_i) dt over the run.

    Trapezoid rule on snapshot times (see ``time_integral``).  The
    normalization is 1/(n0 * rate_scale), which is 1/N^2 unless the run used
    a custom rate scale.
    """
    if not traj.interacting:
        return 0.0
    if plan_dt is not None and np.any(np.diff(traj.times) > plan_dt * (1 + 1e-9)):
        warnings.warn("snapshot spacing exceeds the simulation step", RuntimeWarning)
    norm = traj.n0 * traj.rate_scale
    return time_integral(traj, lambda x, v, t, n: _interaction_sums(
        x, v, t, n, phi, traj.eps, traj.mollifier, norm))


def discrete_compensator(traj: Trajectory, phi: TestFunction) -> float:
    """Compensator of the annihilation jumps of <phi, mu^N> under the stepwise
    thinning scheme: sum over steps and candidate pairs of
    q_pair * (phi_i + phi_j) / N at the pre-annihilation configuration.

    q_pair is the probability that the pair is actually applied.  A fired
    pair is skipped when an earlier-stamped fired pair already used one of
    its particles, so q = p * prod over adjacent candidates k of (1 - p_k/2),
    exact up to O(p^3) per step.  Using p itself would leave an O(dt) bias.

    Needs snapshots at every step (recorded candidates).
    """
    if not traj.interacting:
        return 0.0
    lookup = np.empty(traj.n0, dtype=np.int64)
    log_free = np.zeros(traj.n0)
    total = 0.0
    for snap in traj.snapshots[1:]:
        if snap.candidates is None:
            raise ValueError("trajectory lacks per-step candidate pairs (observe every step)")
        i, j, p = snap.candidates
        if not len(i):
            continue
        ids, x, v = snap.left_limit()
        lookup[ids] = np.arange(len(ids))
        ph = phi(x, v, snap.t)
        lg = np.log1p(-0.5 * p)
        log_free[ids] = 0.0
        np.add.at(log_free, i, lg)
        np.add.at(log_free, j, lg)
        q = p * np.exp(log_free[i] + log_free[j] - 2.0 * lg)
        total += float(np.sum(q * (ph[lookup[i]] + ph[lookup[j]])))
    return total / traj.n0


def identity_residual(traj: Trajectory, phi: TestFunction, compensator: str = "discrete") -> float:
    """Martingale part of <phi_t, mu_t^N> over the run:

    <phi_T, mu_T> - <phi_0, mu_0> - int <(d/dt + v.grad_x + 1/2 Lap_v) phi, mu_t> dt
    + (annihilation compensator).

    ``compensator="trapezoid"`` uses 2 * interaction_functional; the default
    ``"discrete"`` uses the thinning scheme's exact per-step hazard, which
    removes the O(dt) bias that killed pairs introduce into the trapezoid.
    """
    n0 = traj.n0
    first, last = traj.snapshots[0], traj.snapshots[-1]

    def mean(x, v, t):
        return float(np.sum(phi(x, v, t))) / n0 if len(x) else 0.0

    end = mean(last.x, last.v, last.t) - mean(first.x, first.v, first.t)
    drift = time_integral(traj, _per_particle(phi.generator, 1.0 / n0))
    if compensator == "discrete":
        comp = discrete_compensator(traj, phi)
    elif compensator == "trapezoid":
        comp = 2.0 * interaction_functional(traj, phi)
    else:
        raise ValueError(f"unknown compensator {compensator!r}")
    return end - drift + comp


def velocity_cutoff(lam: float, d: int = 1) -> Callable:
    """psi^Lambda(v): 1 on |v| <= Lambda, 0 on |v| >= Lambda + 1, smooth between."""
    if lam <= 0:
        raise ValueError("Lambda must be positive")

    def _s(z):
        z = np.asarray(z, dtype=float)
        return np.where(z > 0, np.exp(-1.0 / np.where(z > 0, z, 1.0)), 0.0)

    def psi(v):
        r = np.linalg.norm(_as_points(v, d), axis=-1) - lam
        a = _s(1.0 - r)
        return a / (a + _s(r))

    return psi


def with_velocity_cutoff(phi: TestFunction, lam: float, d: int = 1) -> TestFunction:
    psi = velocity_cutoff(lam, d)
    return TestFunction(lambda x, v, t=0.0: phi(x, v, t) * psi(v), phi.support_radius,
                        phi.sup, name=f"{phi.name}*psi[{lam:g}]")


def write_functional_rows(path, rows, extra_header: dict | None = None) -> None:
    """CSV with columns N, seed, t, name, value (+ any ``extra_header`` columns)."""
    extra = dict(extra_header or {})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "seed", "t", "name", "value", *extra])
        for n, seed, t, name, value in rows:
            w.writerow([int(n), int(seed), repr(float(t)), name, repr(float(value)), *extra.values()])
