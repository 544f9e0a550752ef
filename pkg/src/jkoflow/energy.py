"""Energy functionals on particle ensembles and the exact interaction velocity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .geometry import (DivergenceEstimate, NumericError, ParticleEnsemble,
                       StructuralError, _displacements)


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    p: float
    q: float

    def __post_init__(self):
        if not self.p < self.q:
            raise ParameterError(f"interaction kernel needs p < q, got p={self.p}, q={self.q}")

    def to_dict(self):
        return {"kind": "interaction", "p": float(self.p), "q": float(self.q)}


@dataclass(frozen=True)
class PorousInternal:
    exponent: float

    def __post_init__(self):
        if not self.exponent > 1:
            raise ParameterError(f"porous exponent must exceed 1, got {self.exponent}")

    def to_dict(self):
        return {"kind": "porous", "m": float(self.exponent)}


def _quadratic(x, stiffness=1.0, center=None):
    if center is not None:
        x = x - torch.as_tensor(center, dtype=x.dtype)
    return 0.5 * stiffness * (x * x).sum(-1)


POTENTIALS = {"quadratic": _quadratic}


def register_potential(name, fn):
    """Add a torch potential ``fn(x, **params) -> (...,)`` to the external registry."""
    POTENTIALS[name] = fn


@dataclass(frozen=True)
class External:
    potential: str = "quadratic"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.potential not in POTENTIALS:
            raise ParameterError(f"unknown potential {self.potential!r}; known: {sorted(POTENTIALS)}")

    def __call__(self, x):
        return POTENTIALS[self.potential](x, **self.params)

    def to_dict(self):
        return {"kind": "external", "potential": self.potential, **self.params}


class TargetHandle:
    """Sample points of a target density plus a torch log-density evaluator."""

    def __init__(self, points, log_density, description=None):
        self.points = np.asarray(points, dtype=np.float64)
        self.log_density = log_density
        self.description = description or {}
        with torch.no_grad():
            own = log_density(torch.tensor(self.points)).numpy()
        if not np.all(np.isfinite(own)):
            raise ParameterError("target density must be strictly positive at its own samples")
        self.densities = np.exp(own)

    def density(self, x):
        with torch.no_grad():
            return np.exp(self.log_density(torch.as_tensor(np.asarray(x, dtype=np.float64))).numpy())

    def ensemble(self):
        return ParticleEnsemble(self.points, self.densities)


def gaussian_log_density(mean, cov):
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    prec = torch.as_tensor(np.linalg.inv(cov))
    mu = torch.as_tensor(mean)
    _, logdet = np.linalg.slogdet(cov)
    const = -0.5 * (len(mean) * math.log(2 * math.pi) + logdet)

    def fn(x):
        z = x - mu.to(x.dtype)
        return const - 0.5 * ((z @ prec.to(x.dtype)) * z).sum(-1)

    return fn


def mixture_log_density(weights, means, stds):
    """Isotropic Gaussian mixture."""
    w = torch.as_tensor(np.log(np.asarray(weights, dtype=np.float64)))
    mu = torch.as_tensor(np.asarray(means, dtype=np.float64))
    sd = torch.as_tensor(np.asarray(stds, dtype=np.float64))
    d = mu.shape[1]

    def fn(x):
        z = x.unsqueeze(-2) - mu.to(x.dtype)
        s2 = (sd * sd).to(x.dtype)
        comp = (-0.5 * (z * z).sum(-1) / s2 - 0.5 * d * torch.log(2 * math.pi * s2))
        return torch.logsumexp(comp + w.to(x.dtype), dim=-1)

    return fn


def gaussian_target(mean, cov, n, rng):
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    pts = rng.multivariate_normal(mean, cov, size=n)
    desc = {"kind": "gaussian", "mean": mean.tolist(), "cov": cov.tolist(), "samples": int(n)}
    return TargetHandle(pts, gaussian_log_density(mean, cov), desc)


def mixture_target(weights, means, stds, n, rng):
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    comp = rng.choice(len(weights), size=n, p=weights)
    pts = means[comp] + stds[comp, None] * rng.standard_normal((n, means.shape[1]))
    desc = {"kind": "mixture", "weights": weights.tolist(), "means": means.tolist(),
            "stds": stds.tolist(), "samples": int(n)}
    return TargetHandle(pts, mixture_log_density(weights, means, stds), desc)


def target_from_dict(desc, rng):
    kind = desc.get("kind")
    n = int(desc.get("samples", 256))
    if kind == "gaussian":
        return gaussian_target(desc["mean"], desc["cov"], n, rng)
    if kind == "mixture":
        return mixture_target(desc["weights"], desc["means"], desc["stds"], n, rng)
    raise ParameterError(f"unknown target kind {kind!r}")


@dataclass(frozen=True, eq=False)
class KL:
    target: TargetHandle

    def to_dict(self):
        return {"kind": "kl", "target": dict(self.target.description)}


EnergySpec = Interaction | PorousInternal | External | KL


def energy_from_dict(d, rng=None):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "interaction":
        return Interaction(float(d["p"]), float(d["q"]))
    if kind == "porous":
        return PorousInternal(float(d["m"]))
    if kind == "external":
        pot = d.pop("potential", "quadratic")
        return External(pot, d)
    if kind == "kl":
        return KL(target_from_dict(d["target"], rng or np.random.default_rng(0)))
    raise ParameterError(f"unknown energy kind {kind!r}")


def kernel_value(r, p, q):
    if not p < q:
        raise ParameterError(f"interaction kernel needs p < q, got p={p}, q={q}")
    if r < 0:
        raise ValueError(f"kernel radius must be nonnegative, got {r}")
    return r ** (q + 1) / (q + 1) - r ** (p + 1) / (p + 1)


def pair_kernel_energy(y, p, q):
    """0.5 * mean_{i,j} K(|y_i - y_j|) over the last-but-one axis; diagonal contributes K(0) = 0."""
    m = y.shape[-2]
    diff = y.unsqueeze(-2) - y.unsqueeze(-3)
    s = (diff * diff).sum(-1)
    diag = torch.eye(m, dtype=torch.bool, device=y.device)
    # keep the r = 0 diagonal out of the power terms so gradients stay finite
    s = torch.where(diag, torch.ones_like(s), s)
    k = s ** ((q + 1) / 2) / (q + 1) - s ** ((p + 1) / 2) / (p + 1)
    k = torch.where(diag, torch.zeros_like(k), k)
    return 0.5 * k.sum((-1, -2)) / (m * m)


def _check_positive(rho, what):
    bad = (~(rho > 0)).nonzero()
    if len(bad):
        idx = int(bad[0, -1])
        raise NumericError(f"{what} needs positive densities; particle {idx} is not", idx)


def pushed_energy(spec, y, rho, div):
    """Monte-Carlo energy of a pushed ensemble, as a torch scalar (or batch over leading axes).

    ``y`` are the moved points, ``rho`` the densities before the move and
    ``div`` the divergence of the displacement, so the pushed density is
    ``rho * exp(-div)``. Passing ``div = 0`` and unmoved points gives the
    energy of the ensemble itself through the same summation path.
    """
    if isinstance(spec, Interaction):
        return pair_kernel_energy(y, spec.p, spec.q)
    if isinstance(spec, External):
        return spec(y).mean(-1)
    if isinstance(spec, PorousInternal):
        _check_positive(rho, "porous internal energy")
        new = rho * torch.exp(-div)
        return (new ** (spec.exponent - 1)).mean(-1) / (spec.exponent - 1)
    if isinstance(spec, KL):
        _check_positive(rho, "KL energy")
        log_new = torch.log(rho) - div
        return (log_new - spec.target.log_density(y)).mean(-1)
    raise StructuralError(f"unsupported energy spec {spec!r}")


def needs_divergence(spec):
    return isinstance(spec, (PorousInternal, KL))


def evaluate_energy(spec, ensemble):
    x = torch.tensor(ensemble.points)
    rho = torch.tensor(ensemble.densities)
    with torch.no_grad():
        return float(pushed_energy(spec, x, rho, torch.zeros_like(rho)))


def energy_of_pushforward(spec, ensemble, field, div):
    v = torch.as_tensor(_displacements(ensemble, field))
    values = div.values if isinstance(div, DivergenceEstimate) else np.asarray(div)
    if values.shape != (ensemble.size,):
        raise StructuralError(f"divergence has shape {values.shape}, expected ({ensemble.size},)")
    x = torch.tensor(ensemble.points)
    rho = torch.tensor(ensemble.densities)
    with torch.no_grad():
        return float(pushed_energy(spec, x + v, rho, torch.as_tensor(values)))


def interaction_velocity(points, p, q):
    if not p < q:
        raise ParameterError(f"interaction kernel needs p < q, got p={p}, q={q}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 1:
        raise StructuralError("need a non-empty (m, d) point array")
    return kernels.pair_velocity(pts, p, q)
