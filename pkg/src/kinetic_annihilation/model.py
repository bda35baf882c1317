"""Interaction mollifier, initial data and the epsilon(N) scaling rule.

The shipped profiles are conveniences: any smooth, radial, compactly
supported profile with unit mass would do.  The interaction profile carries
an extra ``|x|^2`` factor so that it vanishes at the origin; the averaging
profile used for ``eta^delta`` does not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate, special

__all__ = [
    "Mollifier",
    "InitialDensity",
    "UniformBall",
    "ScalingRule",
    "mollifier_eval",
    "sample_initial",
    "epsilon_of",
    "sphere_area",
    "ball_volume",
]


def sphere_area(n: int) -> float:
    """Surface area of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


def ball_volume(n: int, radius: float = 1.0) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1) * radius**n


def _bump(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


_PROFILES: dict[str, Callable] = {
    # vanishes at 0, needed for the interaction kernel
    "weighted_bump": lambda r: np.asarray(r, dtype=float) ** 2 * _bump(r),
    "bump": _bump,
}


@lru_cache(maxsize=None)
def _normalization(profile: str, d: int) -> float:
    fn = _PROFILES[profile]
    radial = integrate.quad(
        lambda r: r ** (d - 1) * float(fn(np.array(r))),
        0.0, 1.0, epsabs=1e-14, epsrel=1e-12, limit=200,
    )[0]
    return 1.0 / (sphere_area(d) * radial)


@dataclass(frozen=True)
class Mollifier:
    """Smooth radial probability density supported in the open unit ball.

    ``profile`` is ``"weighted_bump"`` (c |x|^2 exp(-1/(1-|x|^2)), the
    interaction kernel theta) or ``"bump"`` (the averaging kernel eta).
    """

    d: int = 1
    profile: str = "weighted_bump"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if self.profile not in _PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")

    @property
    def c(self) -> float:
        return _normalization(self.profile, self.d)

    def radial(self, r):
        """theta as a function of |x|."""
        return self.c * _PROFILES[self.profile](r)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.radial(np.linalg.norm(x, axis=-1))

    def scaled_radial(self, r, eps: float):
        """theta^eps as a function of |x|."""
        return eps ** (-self.d) * self.radial(np.asarray(r, dtype=float) / eps)

    @property
    def sup(self) -> float:
        r = np.linspace(0.0, 1.0, 20001)
        return float(self.radial(r).max())


def mollifier_eval(m: Mollifier, eps: float, x) -> np.ndarray | float:
    """theta^eps(x) = eps^-d theta(x/eps); ``x`` has trailing axis of length d."""
    if not (0.0 < eps <= 1.0):
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    x = np.asarray(x, dtype=float)
    if m.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    val = m.scaled_radial(np.linalg.norm(x, axis=-1), eps)
    return float(val) if np.ndim(val) == 0 else val


def _as_points(a, d: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if d == 1 and (a.ndim == 0 or a.shape[-1] != 1):
        a = a[..., None]
    return a


class InitialDensity:
    """Probability density f0(x, v) on R^{2d}, bounded by ``gamma`` and
    supported in the closed ball of radius ``radius`` about the origin.

    ``evaluator(x, v)`` receives arrays with a trailing axis of length d.
    """

    def __init__(self, d: int, gamma: float, radius: float, evaluator: Callable):
        if d < 1 or gamma <= 0 or radius <= 0:
            raise ValueError("need d >= 1, gamma > 0, radius > 0")
        self.d = d
        self.gamma = float(gamma)
        self.radius = float(radius)
        self.evaluator = evaluator

    def __call__(self, x, v):
        x = _as_points(x, self.d)
        v = _as_points(v, self.d)
        out = np.asarray(self.evaluator(x, v), dtype=float)
        return float(out) if out.ndim == 0 else out

    def __repr__(self):
        return f"{type(self).__name__}(d={self.d}, gamma={self.gamma}, radius={self.radius})"


class UniformBall(InitialDensity):
    """Uniform density on a ball in phase space.

    The ball has centre ``center`` (length 2d, defaults to the origin) and
    radius ``r``; the declared support radius is ``|center| + r``.
    """

    def __init__(self, d: int = 1, r: float = 1.0, center=None):
        n = 2 * d
        center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
        if center.shape != (n,):
            raise ValueError(f"center must have length {n}")
        self.ball_radius = float(r)
        self.center = center
        level = 1.0 / ball_volume(n, r)

        def evaluator(x, v):
            y = np.concatenate(np.broadcast_arrays(x, v), axis=-1)
            return np.where(np.linalg.norm(y - center, axis=-1) <= r, level, 0.0)

        super().__init__(d, level, float(np.linalg.norm(center) + r), evaluator)

    def __repr__(self):
        return f"UniformBall(d={self.d}, r={self.ball_radius}, center={self.center.tolist()})"

    def mean(self) -> np.ndarray:
        return self.center.copy()

    def second_moment(self) -> float:
        """E|Y - center|^2 for Y uniform in the ball."""
        n = 2 * self.d
        return n * self.ball_radius**2 / (n + 2)

    def free_density(self, t: float, x, v) -> np.ndarray:
        """Free one-particle density at time t (d = 1 only).

        Gaussian measure of the ellipse of starting points that can reach
        (x, v), integrated along one whitened axis with Gauss-Legendre.
        """
        if self.d != 1:
            raise NotImplementedError("closed-form smoothing is implemented for d = 1")
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        shape = np.broadcast(x, v).shape
        x = np.broadcast_to(x, shape).ravel()
        v = np.broadcast_to(v, shape).ravel()

        # noise of (x, v) after time t: N(0, [[t^3/3, t^2/2], [t^2/2, t]])
        l11 = math.sqrt(t**3 / 3.0)
        l21 = math.sqrt(3.0 * t) / 2.0
        l22 = math.sqrt(t / 4.0)
        # start = Phi^{-1}(X - L z) with Phi^{-1} = [[1, -t], [0, 1]]
        m = np.array([[l11 - t * l21, -t * l22], [l21, l22]])
        c = np.stack([x - t * v, v], axis=-1) - self.center
        z0 = np.linalg.solve(m, c.T).T
        a = m.T @ m
        det_a = a[0, 0] * a[1, 1] - a[0, 1] ** 2
        r2 = self.ball_radius**2
        half = self.ball_radius * math.sqrt(a[1, 1] / det_a)

        lo = np.maximum(-half, -10.0 - z0[:, 0])
        hi = np.minimum(half, 10.0 - z0[:, 0])
        out = np.zeros(x.shape)
        ok = lo < hi
        if np.any(ok):
            th_lo = np.arcsin(np.clip(lo[ok] / half, -1, 1))
            th_hi = np.arcsin(np.clip(hi[ok] / half, -1, 1))
            nodes, weights = _gauss_legendre(96)
            th = 0.5 * (th_hi - th_lo)[:, None] * nodes + 0.5 * (th_hi + th_lo)[:, None]
            w = 0.5 * (th_hi - th_lo)[:, None] * weights
            u = half * np.sin(th)
            du = half * np.cos(th)
            disc = np.sqrt(np.maximum(r2 * a[1, 1] - u**2 * det_a, 0.0))
            centre2 = z0[ok, 1][:, None] - a[0, 1] * u / a[1, 1]
            z2_lo = centre2 - disc / a[1, 1]
            z2_hi = centre2 + disc / a[1, 1]
            z1 = z0[ok, 0][:, None] + u
            band = _normal_band(z2_lo, z2_hi)
            dens = np.exp(-0.5 * z1**2) / math.sqrt(2 * math.pi)
            out[ok] = self.gamma * np.sum(w * du * dens * band, axis=1)
        return out.reshape(shape) if shape else float(out[0])


@lru_cache(maxsize=8)
def _gauss_legendre(n: int):
    return np.polynomial.legendre.leggauss(n)


def _normal_band(lo, hi):
    """P(lo < Z < hi) for standard normal Z without cancellation in the tails."""
    upper = lo > 0
    return np.where(upper, special.ndtr(-lo) - special.ndtr(-hi),
                    special.ndtr(hi) - special.ndtr(lo))


def sample_initial(f0: InitialDensity, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. phase-space points from ``f0`` by rejection.

    Proposals are uniform on the support ball and accepted with probability
    f0 / gamma.  Returns an array of shape (n, 2d): positions then velocities.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dim = 2 * f0.d
    out = np.empty((n, dim))
    filled = 0
    while filled < n:
        batch = max(64, 2 * (n - filled))
        g = rng.standard_normal((batch, dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        y = g * (f0.radius * rng.random(batch) ** (1.0 / dim))[:, None]
        vals = np.asarray(f0(y[:, : f0.d], y[:, f0.d :]), dtype=float)
        if np.any(vals > f0.gamma * (1 + 1e-12)):
            raise ValueError("f0 exceeds its declared bound gamma")
        keep = y[rng.random(batch) * f0.gamma < vals]
        take = min(len(keep), n - filled)
        out[filled : filled + take] = keep[:take]
        filled += take
    return out


@dataclass(frozen=True)
class ScalingRule:
    """eps(N) = N^(-alpha/d); ``local`` is alpha = 1, ``supra-local`` uses 0 < alpha < 1."""

    d: int = 1
    mode: str = "local"
    alpha: float = 1.0

    def __post_init__(self):
        if self.mode not in ("local", "supra-local"):
            raise ValueError(f"unknown scaling mode {self.mode!r}")
        if self.mode == "local" and self.alpha != 1.0:
            raise ValueError("local scaling has alpha = 1")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")


def epsilon_of(rule: ScalingRule, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return float(n) ** (-rule.alpha / rule.d)
