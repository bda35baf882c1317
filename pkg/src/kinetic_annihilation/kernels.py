"""Kolmogorov transition kernels, the free one-particle density, the
hypoelliptic Green's function and the volume function Lambda.

Two diffusion conventions live side by side and are always passed
explicitly: the Green's-function operator ``v . grad_x + Delta_v``
(coefficient 1) and the particle generator ``v . grad_x + 1/2 Delta_v``
(coefficient 1/2).  For the generator ``v . grad_x + a Delta_v`` started at
(x, v), the state at time t is Gaussian with mean (x + t v, v) and
covariance ``2a [[t^3/3, t^2/2], [t^2/2, t]]`` per axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np
from scipy import integrate, optimize

from .model import InitialDensity, ball_volume

__all__ = [
    "KernelToolkit",
    "GreenEstimate",
    "transition_density",
    "kolmogorov_kernel",
    "one_particle_kernel",
    "free_density",
    "greens_function",
    "greens_function_batch",
    "green_shell_sums",
    "volume_lambda",
    "volume_doubling_ratio",
    "exp_decay_constant",
    "exp_decay_envelope",
    "green_tail_bound",
    "normalization_residual",
    "chapman_kolmogorov_residual",
    "HYPOELLIPTIC_DIFFUSION",
    "GENERATOR_DIFFUSION",
]

HYPOELLIPTIC_DIFFUSION = 1.0
GENERATOR_DIFFUSION = 0.5


def _vec(a, d):
    a = np.asarray(a, dtype=float)
    if d == 1 and (a.ndim == 0 or a.shape[-1] != 1):
        a = a[..., None]
    return a


def transition_density(t, x, v, y, w, diffusion: float, d: int = 1):
    """Density at (y, w) after time t for the generator v.grad_x + a Delta_v
    started at (x, v); ``diffusion`` is a."""
    if np.any(np.asarray(t) <= 0):
        raise ValueError("t must be positive")
    a = diffusion
    t = np.asarray(t, dtype=float)
    x, v, y, w = (_vec(z, d) for z in (x, v, y, w))
    tt = t[..., None] if t.ndim else t
    alpha = y - x - tt * v
    beta = w - v
    sq = beta / (2.0 * np.sqrt(tt)) - alpha / tt**1.5
    expo = -(3.0 / a) * np.sum(sq**2, axis=-1) - np.sum(beta**2, axis=-1) / (4.0 * a * t)
    val = (math.sqrt(3.0) / (2.0 * math.pi * a * t**2)) ** d * np.exp(expo)
    return float(val) if np.ndim(val) == 0 else val


def kolmogorov_kernel(t, x, v, y, w, d: int = 1):
    """P_t((x,v),(y,w)) for v.grad_x + Delta_v."""
    return transition_density(t, x, v, y, w, HYPOELLIPTIC_DIFFUSION, d)


def one_particle_kernel(t, x0, v0, x, v, d: int = 1):
    """P*_t((x0,v0),(x,v)) for v.grad_x + 1/2 Delta_v."""
    return transition_density(t, x0, v0, x, v, GENERATOR_DIFFUSION, d)


def free_density(t: float, x, v, f0: InitialDensity, epsabs: float = 1e-10):
    """p(t, x, v) = integral of f0(x0, v0) P*_t((x0, v0), (x, v)).

    Uses the initial density's own ``free_density`` when it has one
    (vectorized, d = 1 uniform ball); otherwise integrates in whitened noise
    coordinates, p = E[f0(Phi_t^{-1}((x, v) - xi))], xi ~ N(0, Sigma_t),
    with nested adaptive quadrature (scalar points only).
    """
    if t <= 0:
        raise ValueError("t must be positive")
    special = getattr(f0, "free_density", None)
    if special is not None and f0.d == 1:
        return special(t, x, v)
    d = f0.d
    x = _vec(x, d).reshape(d)
    v = _vec(v, d).reshape(d)
    l11 = math.sqrt(t**3 / 3.0)
    l21 = math.sqrt(3.0 * t) / 2.0
    l22 = math.sqrt(t / 4.0)
    gauss = 1.0 / math.sqrt(2 * math.pi)

    def integrand(*z):
        z = np.asarray(z).reshape(d, 2)
        xi_x = l11 * z[:, 0]
        xi_v = l21 * z[:, 0] + l22 * z[:, 1]
        v0 = v - xi_v
        x0 = x - xi_x - t * v0
        weight = np.prod(gauss * np.exp(-0.5 * z**2))
        return float(f0(x0, v0)) * weight

    val, err = integrate.nquad(integrand, [(-8.0, 8.0)] * (2 * d),
                               opts={"epsabs": epsabs, "limit": 100})
    if err > 1e3 * epsabs:
        raise RuntimeError(f"free_density quadrature reached only {err:.2e}")
    return val


def _box_rule(centre, half, n):
    """Gauss-Legendre nodes/weights per coordinate on centre +- half."""
    g, w = np.polynomial.legendre.leggauss(n)
    return [(c + h * g, h * w) for c, h in zip(centre, half)]


def normalization_residual(t: float, diffusion: float, d: int = 1, x=None, v=None,
                           n_nodes: int = 64) -> float:
    """|1 - integral of the transition density over (y, w)|, computed by a
    tensor Gauss-Legendre rule on the box mean +- 9 sd per coordinate."""
    x = np.zeros(d) if x is None else _vec(x, d).reshape(d)
    v = np.zeros(d) if v is None else _vec(v, d).reshape(d)
    sx = math.sqrt(2 * diffusion * t**3 / 3.0)
    sv = math.sqrt(2 * diffusion * t)
    rule = _box_rule(np.concatenate([x + t * v, v]), [9 * sx] * d + [9 * sv] * d, n_nodes)
    # integrate coordinate 0 in a loop to bound memory; the rest as a tensor
    rest = list(np.meshgrid(*[r[0] for r in rule[1:]], indexing="ij"))
    rest_w = np.ones(rest[0].shape)
    for k, r in enumerate(rule[1:]):
        shape = [1] * len(rest)
        shape[k] = len(r[1])
        rest_w = rest_w * r[1].reshape(shape)
    total = 0.0
    for node, weight in zip(*rule[0]):
        coords = [np.full(rest[0].shape, node)] + rest
        y = np.stack(coords[:d], -1)
        w = np.stack(coords[d:], -1)
        total += weight * float(np.sum(rest_w * transition_density(t, x, v, y, w, diffusion, d)))
    return abs(1.0 - total)


def chapman_kolmogorov_residual(s: float, t: float, x0, v0, x, v, diffusion: float = GENERATOR_DIFFUSION,
                                n_nodes: int = 200) -> float:
    """|int P_s(X0, Z) P_t(Z, X) dZ - P_{s+t}(X0, X)| for d = 1, tensor
    Gauss-Legendre over the mean +- 12 sd box of the first factor."""
    sx = math.sqrt(2 * diffusion * s**3 / 3.0)
    sv = math.sqrt(2 * diffusion * s)
    (zx, wx), (zv, wv) = _box_rule([x0 + s * v0, v0], [12 * sx, 12 * sv], n_nodes)
    zx, zv = np.meshgrid(zx, zv, indexing="ij")
    w = np.outer(wx, wv)
    lhs = np.sum(w * transition_density(s, x0, v0, zx, zv, diffusion)
                 * transition_density(t, zx, zv, x, v, diffusion))
    return abs(float(lhs) - transition_density(s + t, x0, v0, x, v, diffusion))


def exp_decay_constant(gamma: float, R: float, T: float, d: int) -> float:
    """Constructive constant C with p(t,x,v) <= C exp(-|v|/C) for |v| >= C, t <= T.

    Following the tail argument: for |v| >= 2R + T and |v0| <= R,
    P* <= (sqrt3/pi)^d t^{-2d} exp(-|v|^2/(16 t)), so p <= K |v|^{-2d}
    exp(-|v|/16) once lambda = |v|^2/t is past the maximum of
    lambda^{2d} exp(-lambda/16) (lambda >= 32 d).  Any C >= max(16, 2R + T,
    32d, K) with K = gamma (sqrt3/pi)^d (2R)^{2d} absorbs the prefactor.
    """
    k = gamma * (math.sqrt(3.0) / math.pi) ** d * (2.0 * R) ** (2 * d)
    return max(16.0, 2.0 * R + T, 32.0 * d, k)


def exp_decay_envelope(v_norm, gamma: float, R: float, T: float, d: int, t: float | None = None):
    """Pointwise envelope for p; with ``t`` given, also the sharper
    pre-absorption bound K t^{-2d} exp(-|v|^2/(16 t)) valid for |v| >= 2R + T."""
    v_norm = np.asarray(v_norm, dtype=float)
    c = exp_decay_constant(gamma, R, T, d)
    env = np.where(v_norm >= c, c * np.exp(-v_norm / c), gamma)
    if t is not None:
        k = gamma * (math.sqrt(3.0) / math.pi) ** d * (2.0 * R) ** (2 * d)
        sharp = k * t ** (-2 * d) * np.exp(-(v_norm**2) / (16.0 * t))
        env = np.where(v_norm >= 2 * R + T, np.minimum(env, sharp), env)
    return env


class GreenEstimate(NamedTuple):
    value: float
    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower


def green_tail_bound(t_max: float, d: int) -> float:
    """Upper bound on the t > t_max part of G: (sqrt3/(2 pi))^d t_max^(1-2d)/(2d-1)."""
    return (math.sqrt(3.0) / (2 * math.pi)) ** d * t_max ** (1 - 2 * d) / (2 * d - 1)


def _green_cubic(x, v, y, w, d):
    # with u = 1/t the exponent of P_t is -q(u), q(u) = sum 3a^2 u^3 - 3ab u^2 + b^2 u,
    # a = y - x, b = w - v (per axis, diffusion 1).  q' = sum (3 a u - b)^2 >= 0.
    a = _vec(y, d) - _vec(x, d)
    b = _vec(w, d) - _vec(v, d)
    return a, b


def _q(u, a, b):
    u = np.asarray(u)[..., None]
    return np.sum(3 * a**2 * u**3 - 3 * a * b * u**2 + b**2 * u, axis=-1)


def greens_function(x, v, y, w, d: int = 1, t_max: float = 50.0,
                    full_output: bool = False, epsrel: float = 1e-10):
    """G((x,v),(y,w)) = integral over t > 0 of P_t, for D = 2d >= 2.

    The (0, t_max] part is adaptive quadrature in log(1/t); the tail beyond
    t_max is integrated as well and bracketed by its closed-form bound.
    With ``full_output`` returns a GreenEstimate(value, lower, upper).
    """
    a, b = _green_cubic(x, v, y, w, d)
    a = a.reshape(d)
    b = b.reshape(d)
    if not np.any(a) and not np.any(b):
        raise ValueError("G is singular at X = Y")
    pref = (math.sqrt(3.0) / (2 * math.pi)) ** d

    def q(u):
        return float(np.sum(3 * a**2 * u**3 - 3 * a * b * u**2 + b**2 * u))

    def level(target):
        hi = 1.0
        while q(hi) < target:
            hi *= 2.0
        return optimize.brentq(lambda u: q(u) - target, 0.0, hi, xtol=1e-14 * hi, rtol=1e-12)

    u_peak = level(1.0)
    u_end = level(800.0)

    def f(s):
        u = math.exp(s)
        return pref * u ** (2 * d - 1) * math.exp(-q(u))

    s_lo = -math.log(t_max)
    lower = 0.0
    if u_end > 1.0 / t_max:
        s_end = math.log(u_end)
        pts = [math.log(u_peak)] if s_lo < math.log(u_peak) < s_end else None
        lower = integrate.quad(f, s_lo, s_end, points=pts, epsabs=0.0,
                               epsrel=epsrel, limit=400)[0]
    # tail t > t_max, i.e. u in (0, 1/t_max)
    tail = integrate.quad(lambda u: pref * u ** (2 * d - 2) * math.exp(-q(u)),
                          0.0, min(1.0 / t_max, u_end), epsabs=0.0, epsrel=epsrel)[0]
    est = GreenEstimate(lower + tail, lower, lower + green_tail_bound(t_max, d))
    return est if full_output else est.value


def greens_function_batch(x, v, y, w, n_nodes: int = 400):
    """Vectorized G for d = 1 (full time integral, no truncation).

    Trapezoid rule in s = log(1/t) on a per-point window; the integrand is
    analytic and decays exponentially at both ends, so the rule converges
    geometrically.  Cross-checked against ``greens_function``.
    """
    x, v, y, w = np.broadcast_arrays(*(np.asarray(z, dtype=float) for z in (x, v, y, w)))
    shape = x.shape
    a = (y - x).ravel()
    b = (w - v).ravel()
    if np.any((a == 0) & (b == 0)):
        raise ValueError("G is singular at X = Y")
    # q(u) = u (3 (a u - b/2)^2 + b^2/4) >= u max(b^2/4, 3 a^2 u^2 / 4), so q >= 800
    # at the smaller of the two bounds below; it overshoots the root by a bounded factor
    with np.errstate(divide="ignore"):
        hi = np.minimum(3200.0 / b**2, np.cbrt(3200.0 / (3.0 * a**2)))
    s_hi = np.log(hi)
    s_lo = s_hi - 48.0
    s = s_lo[:, None] + (s_hi - s_lo)[:, None] * np.linspace(0.0, 1.0, n_nodes)
    u = np.exp(s)
    qq = 3 * a[:, None] ** 2 * u**3 - 3 * (a * b)[:, None] * u**2 + b[:, None] ** 2 * u
    f = u * np.exp(-qq)
    h = (s_hi - s_lo) / (n_nodes - 1)
    val = h * (f.sum(axis=1) - 0.5 * (f[:, 0] + f[:, -1]))
    # below s_lo the integrand is ~u: add u_lo exactly
    val += np.exp(s_lo)
    return (math.sqrt(3.0) / (2 * math.pi) * val).reshape(shape)


def green_shell_sums(x, v, eta: float | None = None, delta: float = 1.0,
                     n_shells: int = 13, n_radial: int = 12, rtol: float = 1e-3,
                     n_nodes: int = 300):
    """Integrals of |G(X, .)|^(1+eta) over Euclidean dyadic shells around X (d = 1).

    Shell k is {Y : delta 2^-(k+1) < |Y - X| <= delta 2^-k}.  Euclidean shells
    stand in for control-metric balls.  Returns (shell_values, partial_sums).
    """
    if eta is None:
        eta = 1.0 / 8.0
    p = 1.0 + eta
    gl_r, gw_r = np.polynomial.legendre.leggauss(n_radial)
    shells = np.empty(n_shells)
    for k in range(n_shells):
        r_out = delta * 2.0**-k
        r_in = 0.5 * r_out
        r = 0.5 * (r_out - r_in) * gl_r + 0.5 * (r_out + r_in)
        wr = 0.5 * (r_out - r_in) * gw_r * r

        def ring(phi):
            yy = x + r * math.cos(phi)
            ww = v + r * math.sin(phi)
            g = greens_function_batch(x, v, yy, ww, n_nodes=n_nodes)
            return np.abs(g) ** p

        # G peaks where the position offset is small relative to r
        pts = sorted({0.5 * math.pi, 1.5 * math.pi})
        vals = integrate.quad_vec(ring, 0.0, 2 * math.pi, epsrel=rtol, points=pts, limit=2000)[0]
        shells[k] = float(np.dot(wr, vals))
    return shells, np.cumsum(shells)


def volume_lambda(v, delta, d: int | None = None):
    """Lambda(X, delta) = sum_i |v_i| delta^(4d-1) + delta^(4d).

    Works on floats, numpy arrays or ``fractions.Fraction`` (exact).
    """
    if isinstance(v, (list, tuple)) and v and isinstance(v[0], Fraction):
        dd = len(v) if d is None else d
        return sum(abs(c) for c in v) * delta ** (4 * dd - 1) + delta ** (4 * dd)
    v = np.asarray(v, dtype=float)
    dd = (1 if v.ndim == 0 else v.shape[-1]) if d is None else d
    s = np.abs(v) if v.ndim == 0 else np.sum(np.abs(v), axis=-1)
    return s * np.asarray(delta, dtype=float) ** (4 * dd - 1) + np.asarray(delta, dtype=float) ** (4 * dd)


def volume_doubling_ratio(v, delta, d: int | None = None):
    """Lambda(X, 2 delta) / Lambda(X, delta)."""
    return volume_lambda(v, 2 * delta, d) / volume_lambda(v, delta, d)


@dataclass
class KernelToolkit:
    """Bundle of kernel evaluators with shared quadrature settings."""

    d: int = 1
    t_max: float = 50.0
    epsrel: float = 1e-10

    def __post_init__(self):
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")

    @property
    def eta(self) -> float:
        """Integrability exponent 1/(8d); satisfies 1 + eta - 4 d eta > 1/2."""
        return 1.0 / (8 * self.d)

    def kolmogorov(self, t, x, v, y, w):
        return kolmogorov_kernel(t, x, v, y, w, self.d)

    def one_particle(self, t, x0, v0, x, v):
        return one_particle_kernel(t, x0, v0, x, v, self.d)

    def green(self, x, v, y, w, full_output=False):
        return greens_function(x, v, y, w, self.d, self.t_max, full_output, self.epsrel)

    def free_density(self, t, x, v, f0):
        return free_density(t, x, v, f0)

    def volume(self, v, delta):
        return volume_lambda(v, delta, self.d)
