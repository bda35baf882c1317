"""N-particle second-order dynamics with pairwise annihilation.

Free motion is integrated exactly: over a step dt each axis receives the
joint Gaussian increment of (int_0^dt B ds, B_dt).  Annihilation is resolved
per step by Poisson thinning over the candidate pairs found on a cell grid of
cell size eps.

Random streams: the motion stream draws one (n0, d, 2) normal block per
step, row i belonging to particle i whether or not it is alive, so a run
with annihilation and the free run with the same seed move every surviving
particle identically (bitwise).  Event draws come from a separate stream.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .model import InitialDensity, Mollifier, sample_initial

__all__ = [
    "ParticleSystem",
    "CellGrid",
    "StepPlan",
    "Snapshot",
    "Trajectory",
    "free_step",
    "annihilation_step",
    "run",
    "free_system_run",
    "brute_force_pairs",
    "write_snapshots_csv",
    "write_snapshots_binary",
    "write_events_csv",
]

_STREAM_INIT, _STREAM_MOTION, _STREAM_EVENTS = 0, 1, 2


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, tag])))


@dataclass
class ParticleSystem:
    x: np.ndarray
    v: np.ndarray
    eps: float
    mollifier: Mollifier
    seed: int = 0
    rate_scale: float | None = None
    t: float = 0.0
    alive: np.ndarray | None = None
    events: list = field(default_factory=list)
    interacting: bool = True
    last_candidates: tuple | None = None

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float).reshape(len(self.x), -1)
        self.v = np.array(self.v, dtype=float).reshape(self.x.shape)
        if self.alive is None:
            self.alive = np.ones(len(self.x), dtype=bool)
        if self.rate_scale is None:
            self.rate_scale = float(self.n0)
        if not (0.0 < self.eps <= 1.0):
            raise ValueError("eps must lie in (0, 1]")
        if self.mollifier.d != self.d:
            raise ValueError("mollifier dimension does not match positions")
        self.death_time = np.full(self.n0, np.inf)
        self._motion = _stream(self.seed, _STREAM_MOTION)
        self._event_rng = _stream(self.seed, _STREAM_EVENTS)

    @classmethod
    def from_density(cls, f0: InitialDensity, n: int, mollifier: Mollifier,
                     eps: float, seed: int, **kw) -> "ParticleSystem":
        y = sample_initial(f0, n, _stream(seed, _STREAM_INIT))
        return cls(y[:, : f0.d], y[:, f0.d :], eps, mollifier, seed=seed, **kw)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n0(self) -> int:
        return len(self.x)

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def copy(self) -> "ParticleSystem":
        new = ParticleSystem(self.x.copy(), self.v.copy(), self.eps, self.mollifier,
                             self.seed, self.rate_scale, self.t, self.alive.copy(),
                             list(self.events), self.interacting)
        new.death_time = self.death_time.copy()
        new._motion.bit_generator.state = self._motion.bit_generator.state
        new._event_rng.bit_generator.state = self._event_rng.bit_generator.state
        return new


class CellGrid:
    """Alive particles binned into cubic cells of side ``cell``.

    Any pair closer than ``cell`` lies in the same or adjacent cells, so
    ``pairs()`` only scans a half stencil of neighbouring cells.
    """

    def __init__(self, x: np.ndarray, ids: np.ndarray, cell: float):
        self.cell = float(cell)
        self.ids = np.asarray(ids)
        self.x = np.asarray(x, dtype=float).reshape(len(self.ids), -1)
        d = self.x.shape[1]
        coords = np.floor(self.x / self.cell).astype(np.int64)
        if len(coords):
            self.origin = coords.min(axis=0) - 1
            self.shape = coords.max(axis=0) - self.origin + 2
        else:
            self.origin = np.zeros(d, dtype=np.int64)
            self.shape = np.ones(d, dtype=np.int64)
        self.coords = coords
        # row-major linear key; python ints guard against overflow in high d
        self._strides = np.array([int(np.prod(self.shape[k + 1:], dtype=object)) for k in range(d)],
                                 dtype=np.int64)
        keys = (coords - self.origin) @ self._strides if len(coords) else np.zeros(0, np.int64)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]
        self.keys = keys

    @property
    def bounding_box(self):
        lo = self.origin * self.cell
        return lo, lo + self.shape * self.cell

    def cells(self) -> dict:
        """Map integer cell coordinates to the particle ids they hold."""
        out: dict = {}
        for c, i in zip(map(tuple, self.coords.tolist()), self.ids.tolist()):
            out.setdefault(c, []).append(i)
        return out

    def _half_stencil(self):
        d = self.x.shape[1]
        for off in itertools.product((-1, 0, 1), repeat=d):
            nz = [o for o in off if o != 0]
            if not nz or nz[0] > 0:
                yield np.array(off, dtype=np.int64)

    def pairs(self, cutoff: float | None = None):
        """Candidate pairs (ids_i, ids_j, distance) with distance < cutoff."""
        cutoff = self.cell if cutoff is None else cutoff
        n = len(self.ids)
        if n < 2:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0)
        # work in sorted order: sorted needles make searchsorted cheap
        pos = np.arange(n)
        out_i, out_j = [], []
        for off in self._half_stencil():
            target = self.sorted_keys + off @ self._strides
            lo = np.searchsorted(self.sorted_keys, target, side="left")
            hi = np.searchsorted(self.sorted_keys, target, side="right")
            if not off.any():
                lo = pos + 1
            counts = np.maximum(hi - lo, 0)
            total = int(counts.sum())
            if total == 0:
                continue
            src = np.repeat(pos, counts)
            starts = np.repeat(lo - np.cumsum(counts) + counts, counts)
            out_i.append(self.order[src])
            out_j.append(self.order[starts + np.arange(total)])
        if not out_i:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0)
        i = np.concatenate(out_i)
        j = np.concatenate(out_j)
        r = np.linalg.norm(self.x[i] - self.x[j], axis=1)
        keep = r < cutoff
        return self.ids[i[keep]], self.ids[j[keep]], r[keep]


def brute_force_pairs(x: np.ndarray, ids: np.ndarray, cutoff: float):
    """O(n^2) reference for CellGrid.pairs; returns a set of sorted id tuples."""
    x = np.asarray(x, dtype=float).reshape(len(ids), -1)
    diff = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    a, b = np.nonzero(np.triu(diff < cutoff, k=1))
    return {tuple(sorted((int(ids[p]), int(ids[q])))) for p, q in zip(a, b)}


@dataclass(frozen=True)
class StepPlan:
    """Time step and observation cadence.

    ``max_pair_probability`` caps dt * sup(theta^eps) / N, the ordered-pair
    hazard per step.
    """

    dt: float
    observe_every: int = 1
    max_pair_probability: float = 0.2

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.observe_every < 1:
            raise ValueError("observe_every must be >= 1")

    def check(self, sys: ParticleSystem) -> None:
        hazard = self.dt * sys.mollifier.sup * sys.eps ** (-sys.d) / sys.rate_scale
        if sys.interacting and hazard > self.max_pair_probability:
            raise ValueError(
                f"dt={self.dt} gives per-pair hazard {hazard:.3g} > {self.max_pair_probability}")


@dataclass
class Snapshot:
    """State after a step, plus the pre-death states of particles removed
    since the previous snapshot (so the left limit at ``t`` is recoverable)."""

    t: float
    ids: np.ndarray
    x: np.ndarray
    v: np.ndarray
    killed_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    killed_x: np.ndarray | None = None
    killed_v: np.ndarray | None = None
    # candidate pairs (ids) and their firing probabilities for the step that
    # ended here; only kept when snapshots are taken every step
    candidates: tuple | None = None

    def left_limit(self):
        """(ids, x, v) just before this snapshot's annihilations."""
        if self.killed_x is None or not len(self.killed_ids):
            return self.ids, self.x, self.v
        return (np.concatenate([self.ids, self.killed_ids]),
                np.concatenate([self.x, self.killed_x]),
                np.concatenate([self.v, self.killed_v]))


@dataclass
class Trajectory:
    snapshots: list
    events: np.ndarray  # rows (t, i, j)
    n0: int
    rate_scale: float
    eps: float
    mollifier: Mollifier
    dt: float
    death_time: np.ndarray
    interacting: bool = True

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    @property
    def alive_counts(self) -> np.ndarray:
        return np.array([len(s.ids) for s in self.snapshots])

    def check_bookkeeping(self) -> None:
        """Raise AssertionError unless counts are monotone, parity-consistent
        and the event total is at most n0 / 2."""
        counts = self.alive_counts
        n_events = len(self.events)
        assert 2 * n_events <= self.n0, "more events than n0/2"
        assert np.all(np.diff(counts) <= 0), "alive count increased"
        assert np.all((self.n0 - counts) % 2 == 0), "parity broken"
        if len(self.events):
            ev_t = self.events[:, 0]
            for snap, c in zip(self.snapshots, counts):
                assert self.n0 - 2 * int(np.sum(ev_t <= snap.t + 1e-12)) == c, "event log mismatch"
        assert counts[-1] == self.n0 - 2 * n_events


def free_step(sys: ParticleSystem, dt: float, move: bool = True) -> ParticleSystem:
    """Advance every alive particle by the exact free-motion increment over dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = sys._motion.standard_normal((sys.n0, sys.d, 2))
    if move:
        a = sys.alive
        sdt = math.sqrt(dt)
        dv = sdt * z[a, :, 0]
        # Var = dt^3/3, Cov with dv = dt^2/2
        dx = sys.v[a] * dt + dt * sdt * (0.5 * z[a, :, 0] + z[a, :, 1] / (2.0 * math.sqrt(3.0)))
        sys.x[a] = sys.x[a] + dx
        sys.v[a] = sys.v[a] + dv
    sys.t += dt
    return sys


def annihilation_step(sys: ParticleSystem, dt: float):
    """Resolve annihilations over (t - dt, t] at the current positions.

    Each unordered pair closer than eps fires with probability
    1 - exp(-dt * 2 theta^eps(r) / N); fired candidates are applied in order
    of a uniform in-step timestamp, skipping any that involve a particle
    already removed.  Returns the array of ids removed; the candidate pairs
    and probabilities are left in ``sys.last_candidates``.
    """
    ids = np.flatnonzero(sys.alive)
    empty = np.zeros(0, dtype=np.int64)
    sys.last_candidates = (empty, empty, np.zeros(0))
    if len(ids) < 2:
        return empty
    grid = CellGrid(sys.x[ids], ids, sys.eps)
    i, j, r = grid.pairs()
    if not len(i):
        return empty
    rate = 2.0 * sys.mollifier.scaled_radial(r, sys.eps) / sys.rate_scale
    prob = -np.expm1(-dt * rate)
    sys.last_candidates = (i, j, prob)
    u = sys._event_rng.random((len(i), 2))
    fire = np.flatnonzero(u[:, 0] < prob)
    if not len(fire):
        return empty
    removed = []
    for k in fire[np.argsort(u[fire, 1], kind="stable")]:
        a, b = int(i[k]), int(j[k])
        if sys.alive[a] and sys.alive[b]:
            when = sys.t - dt + u[k, 1] * dt
            sys.alive[a] = sys.alive[b] = False
            sys.death_time[a] = sys.death_time[b] = when
            sys.events.append((when, min(a, b), max(a, b)))
            removed += [a, b]
    return np.array(removed, dtype=np.int64)


def _snapshot(sys, killed, candidates=None):
    ids = np.flatnonzero(sys.alive)
    snap = Snapshot(sys.t, ids, sys.x[ids].copy(), sys.v[ids].copy(), candidates=candidates)
    if killed:
        k = np.concatenate(killed)
        snap.killed_ids = k
        snap.killed_x = sys.x[k].copy()
        snap.killed_v = sys.v[k].copy()
    return snap


def run(sys: ParticleSystem, T: float, plan: StepPlan, free_motion: bool = True) -> Trajectory:
    """Alternate free_step and annihilation_step up to time T.

    ``T`` must be a whole number of steps.  A snapshot is stored at t = 0
    and every ``plan.observe_every`` steps.  ``free_motion=False`` freezes
    positions (used to test the annihilation clock in isolation).
    """
    if T <= 0:
        raise ValueError("T must be positive")
    n_steps = int(round(T / plan.dt))
    if n_steps < 1 or abs(n_steps * plan.dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a positive multiple of dt")
    plan.check(sys)
    t0 = sys.t
    snaps = [_snapshot(sys, [])]
    killed = []
    for step in range(1, n_steps + 1):
        free_step(sys, plan.dt, move=free_motion)
        sys.t = t0 + step * plan.dt
        if sys.interacting:
            gone = annihilation_step(sys, plan.dt)
            if len(gone):
                killed.append(gone)
        if step % plan.observe_every == 0 or step == n_steps:
            cand = sys.last_candidates if (plan.observe_every == 1 and sys.interacting) else None
            snaps.append(_snapshot(sys, killed, cand))
            killed = []
    events = np.array(sys.events, dtype=float).reshape(-1, 3)
    return Trajectory(snaps, events, sys.n0, sys.rate_scale, sys.eps, sys.mollifier,
                      plan.dt * plan.observe_every, sys.death_time.copy(), sys.interacting)


def free_system_run(sys: ParticleSystem, T: float, plan: StepPlan) -> Trajectory:
    """Same initial data and motion stream as ``sys`` with annihilation off."""
    free = sys.copy()
    free.interacting = False
    return run(free, T, plan)


def write_snapshots_csv(traj: Trajectory, path) -> None:
    """One row per alive particle per snapshot: t, id, x..., v..."""
    d = traj.snapshots[0].x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "id"] + [f"x{k}" for k in range(d)] + [f"v{k}" for k in range(d)])
        for s in traj.snapshots:
            for i, xi, vi in zip(s.ids, s.x, s.v):
                w.writerow([repr(s.t), int(i), *map(repr, xi.tolist()), *map(repr, vi.tolist())])


def write_snapshots_binary(traj: Trajectory, path) -> None:
    """Same records as the CSV dump, as a float64 .npy array with columns t, id, x..., v..."""
    blocks = [np.column_stack([np.full(len(s.ids), s.t), s.ids, s.x, s.v]) for s in traj.snapshots]
    np.save(path, np.concatenate(blocks).astype("<f8"))


def write_events_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "i", "j"])
        for t, i, j in traj.events:
            w.writerow([repr(float(t)), int(i), int(j)])
