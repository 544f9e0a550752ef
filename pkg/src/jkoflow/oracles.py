"""Reference solutions and error metrics.

Barenblatt profiles for the porous medium flow, the ring-equilibrium
radius of the attraction-repulsion aggregation flow, a reference
integrator for the particle ODE, and the closed-form Gaussian KL.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .energy import ParameterError, interaction_velocity
from .geometry import ParticleEnsemble


class EquilibriumNotFound(RuntimeError):
    pass


@dataclass(frozen=True)
class BarenblattSpec:
    m: float
    dim: int
    C: float
    t0: float

    def __post_init__(self):
        if not self.m > 1:
            raise ParameterError(f"porous exponent must exceed 1, got {self.m}")
        if self.dim < 1:
            raise ParameterError("dimension must be >= 1")
        if not (self.C > 0 and self.t0 > 0):
            raise ParameterError("Barenblatt C and t0 must be positive")

    @property
    def alpha(self):
        return self.dim / (self.dim * (self.m - 1) + 2)

    @property
    def beta(self):
        return (self.m - 1) * self.alpha / (2 * self.dim * self.m)

    def support_radius(self, t):
        return math.sqrt(self.C * (t + self.t0) ** (2 * self.alpha / self.dim) / self.beta)


def barenblatt_density(spec, t, x):
    """Density at time t; x is a single position or an (n, d) array."""
    s = t + spec.t0
    if not s > 0:
        raise ValueError("t + t0 must be positive")
    x = np.asarray(x, dtype=np.float64)
    r2 = np.sum(x * x, axis=-1)
    core = np.maximum(spec.C - spec.beta * r2 * s ** (-2 * spec.alpha / spec.dim), 0.0)
    return s ** (-spec.alpha) * core ** (1.0 / (spec.m - 1))


def _directions(n, d, rng):
    if d == 1:
        return np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def barenblatt_sample(spec, t, n, rng, landmarks=0, landmark_radius=0.05):
    """Radial inverse-CDF sampling with exact density values attached.

    The normalized squared radius (r / R)^2 of the profile is
    Beta(d/2, 1/(m-1) + 1) distributed, so inverting its CDF gives
    exact radial samples. ``landmarks`` extra points are placed uniformly
    in a small ball of ``landmark_radius * R`` around the origin.
    """
    d = spec.dim
    R = spec.support_radius(t)
    w = special.betaincinv(d / 2.0, 1.0 / (spec.m - 1) + 1.0, rng.random(n))
    pts = R * np.sqrt(w)[:, None] * _directions(n, d, rng)
    if landmarks:
        u = rng.random(landmarks) ** (1.0 / d)
        extra = landmark_radius * R * u[:, None] * _directions(landmarks, d, rng)
        pts = np.concatenate([pts, extra])
    return ParticleEnsemble(pts, barenblatt_density(spec, t, pts))


def barenblatt_divergence(spec, t):
    s = t + spec.t0
    if not s > 0:
        raise ValueError("t + t0 must be positive")
    return spec.dim / ((spec.dim * (spec.m - 1) + 2) * s)


def barenblatt_velocity(spec, t, x):
    return spec.alpha / spec.dim * np.asarray(x, dtype=np.float64) / (t + spec.t0)


def _force(r, p, q):
    return r ** p - r ** q


def ring_integral(r, p, q, nodes=64):
    theta, w = np.polynomial.legendre.leggauss(nodes)
    theta = 0.25 * math.pi * (theta + 1.0)
    w = 0.25 * math.pi * w
    s = np.sin(theta)
    return float(np.sum(w * _force(2.0 * r * s, p, q) * s))


def ring_radius(p, q, nodes=64, bracket=(1e-3, 10.0), tol=1e-10):
    """Radius of the ring equilibrium: root of the kernel-force quadrature."""
    if not p < q:
        raise EquilibriumNotFound(f"no ring equilibrium for p={p}, q={q} (need p < q)")
    lo, hi = bracket
    f_lo, f_hi = ring_integral(lo, p, q, nodes), ring_integral(hi, p, q, nodes)
    if f_lo == 0.0:
        return lo
    if np.sign(f_lo) == np.sign(f_hi):
        raise EquilibriumNotFound(f"no sign change of the ring integral on [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid = ring_integral(mid, p, q, nodes)
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ring_points(radius, n, center=(0.0, 0.0), phase=0.0):
    ang = phase + 2 * math.pi * np.arange(n) / n
    return np.asarray(center, dtype=np.float64) + radius * np.stack([np.cos(ang), np.sin(ang)], 1)


def integrate_particle_ode(points, p, q, dt_ode, steps):
    """Classical RK4 on dx_i/dt = interaction velocity."""
    if not dt_ode > 0:
        raise ValueError("dt_ode must be positive")
    x = np.array(points, dtype=np.float64)
    for _ in range(int(steps)):
        k1 = interaction_velocity(x, p, q)
        k2 = interaction_velocity(x + 0.5 * dt_ode * k1, p, q)
        k3 = interaction_velocity(x + 0.5 * dt_ode * k2, p, q)
        k4 = interaction_velocity(x + dt_ode * k3, p, q)
        x = x + dt_ode / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def relative_errors(pred, spec, t):
    exact = barenblatt_density(spec, t, pred.points)
    rho = pred.densities
    if np.any(rho <= 0):
        raise ValueError("predicted densities must be positive")
    top = exact.max()
    if not top > 0:
        raise ValueError("exact density vanishes at every sampled point; L-infinity error undefined")
    gap = np.abs(rho - exact)
    return float(gap.sum() / rho.sum()), float(gap.max() / top)


@dataclass
class ErrorReport:
    times: list = field(default_factory=list)
    l1: list = field(default_factory=list)
    linf: list = field(default_factory=list)

    def add(self, t, l1, linf):
        self.times.append(float(t))
        self.l1.append(float(l1))
        self.linf.append(float(linf))

    def summary(self):
        l1, linf = np.asarray(self.l1), np.asarray(self.linf)
        return {"mean_L1": float(l1.mean()), "std_L1": float(l1.std()),
                "mean_Linf": float(linf.mean()), "std_Linf": float(linf.std())}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "L1", "Linf"])
            for row in zip(self.times, self.l1, self.linf):
                w.writerow([repr(v) for v in row])
            s = self.summary()
            w.writerow(list(s))
            w.writerow([repr(v) for v in s.values()])

    @classmethod
    def read_csv(cls, path):
        rep = cls()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        for row in rows[1:]:
            if row and row[0] == "mean_L1":
                break
            rep.add(*map(float, row))
        return rep


def _check_spd(cov):
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if not np.allclose(cov, cov.T):
        raise ParameterError("covariance is not symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ParameterError("covariance is not positive definite") from exc
    return cov


def gaussian_kl(mean0, cov0, mean1, cov1):
    """KL(N(mean0, cov0) || N(mean1, cov1))."""
    cov0, cov1 = _check_spd(cov0), _check_spd(cov1)
    mu = np.atleast_1d(np.asarray(mean1, dtype=np.float64) - np.asarray(mean0, dtype=np.float64))
    k = cov0.shape[0]
    inv1 = np.linalg.inv(cov1)
    _, ld0 = np.linalg.slogdet(cov0)
    _, ld1 = np.linalg.slogdet(cov1)
    kl = 0.5 * (np.trace(inv1 @ cov0) + mu @ inv1 @ mu - k + ld1 - ld0)
    return max(float(kl), 0.0)
