"""Particle ensembles, transport-map application and point-cloud metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels


class StructuralError(ValueError):
    """Shapes or dimensions of inputs do not fit together."""


class NumericError(ArithmeticError):
    """A non-finite or otherwise invalid number was produced or supplied."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """A density represented by sample points and the density values at them."""

    points: np.ndarray
    densities: np.ndarray
    step: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        rho = np.array(self.densities, dtype=np.float64).reshape(-1)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise StructuralError(f"points must be a non-empty (m, d) array, got {pts.shape}")
        if rho.shape[0] != pts.shape[0]:
            raise StructuralError(
                f"{pts.shape[0]} points but {rho.shape[0]} density values")
        if not np.all(np.isfinite(pts)):
            bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
            raise NumericError(f"non-finite coordinate at particle {bad}", bad)
        if not np.all(np.isfinite(rho)) or np.any(rho < 0):
            bad = int(np.argwhere(~(np.isfinite(rho) & (rho >= 0)))[0, 0])
            raise NumericError(f"invalid density {rho[bad]!r} at particle {bad}", bad)
        if not np.any(rho > 0):
            raise NumericError("all density values are zero")
        if int(self.step) < 0:
            raise StructuralError("step index must be nonnegative")
        pts.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "densities", rho)
        object.__setattr__(self, "step", int(self.step))

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def size(self):
        return self.points.shape[0]

    def __len__(self):
        return self.size

    def __eq__(self, other):
        if not isinstance(other, ParticleEnsemble):
            return NotImplemented
        return (self.step == other.step
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.densities, other.densities))

    def replace(self, **changes):
        kw = dict(points=self.points, densities=self.densities, step=self.step, meta=self.meta)
        kw.update(changes)
        return ParticleEnsemble(**kw)

    def to_text(self):
        lines = [f"dim={self.dim} count={self.size} step={self.step}"]
        for x, r in zip(self.points, self.densities):
            lines.append(" ".join(f"{v:.17g}" for v in (*x, r)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise StructuralError("empty ensemble file")
        try:
            header = dict(tok.split("=", 1) for tok in lines[0].split())
            dim, count, step = int(header["dim"]), int(header["count"]), int(header["step"])
        except (KeyError, ValueError) as exc:
            raise StructuralError(f"bad ensemble header {lines[0]!r}") from exc
        rows = lines[1:]
        if len(rows) != count:
            raise StructuralError(f"header says {count} particles, found {len(rows)}")
        data = np.array([[float(v) for v in row.split()] for row in rows], dtype=np.float64)
        if data.shape != (count, dim + 1):
            raise StructuralError(f"expected {dim + 1} columns per particle")
        return cls(data[:, :dim], data[:, dim], step=step)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class DivergenceEstimate:
    values: np.ndarray
    eps: float


class DisplacementField:
    """Wraps a torch map ``(n, d) -> (n, d)`` so it accepts numpy or torch input."""

    def __init__(self, fn, dim=None):
        self.fn = fn
        self.dim = dim

    def __call__(self, x):
        if isinstance(x, torch.Tensor):
            return self.fn(x)
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
        with torch.no_grad():
            return self.fn(t).detach().cpu().numpy()


def linear_field(A, b=None):
    """V(x) = x A^T + b, handy as a stub operator and in tests."""
    A = torch.as_tensor(np.asarray(A, dtype=np.float64))
    b = torch.zeros(A.shape[0], dtype=torch.float64) if b is None else torch.as_tensor(
        np.asarray(b, dtype=np.float64))

    def fn(x):
        return x @ A.to(x.dtype).T + b.to(x.dtype)

    return DisplacementField(fn, dim=A.shape[0])


def zero_field(dim):
    return DisplacementField(lambda x: torch.zeros_like(x), dim=dim)


def default_eps(points):
    pts = np.asarray(points) if not isinstance(points, torch.Tensor) else points.detach().cpu().numpy()
    diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    return 1e-3 * diag if diag > 0 else 1e-3


def _eps_like(eps, x):
    """Broadcast a scalar or per-prompt eps to shape (..., 1, 1) against x of shape (..., m, d)."""
    e = torch.as_tensor(eps, dtype=x.dtype, device=x.device)
    return e.reshape(e.shape + (1, 1)) if e.dim() else e


def stencil(x, eps):
    """Stack x and its central-difference neighbours x +- eps e_j along a new leading axis.

    ``x`` has shape (..., m, d); ``eps`` is a scalar or has the leading
    batch shape of x. The result has shape (2d + 1, ..., m, d): index 0 is
    x, then the pairs (x + eps e_j, x - eps e_j) for j = 0..d-1.
    """
    d = x.shape[-1]
    e = _eps_like(eps, x)
    eye = torch.eye(d, dtype=x.dtype, device=x.device)
    shifted = [x]
    for j in range(d):
        shifted.append(x + eye[j] * e)
        shifted.append(x - eye[j] * e)
    return torch.stack(shifted)


def split_stencil(values, eps):
    """Inverse of :func:`stencil` for field values: returns (V(x), div V(x))."""
    d = values.shape[-1]
    e = _eps_like(eps, values[0])
    e = e[..., 0] if e.dim() else e
    div = torch.zeros(values.shape[1:-1], dtype=values.dtype, device=values.device)
    for j in range(d):
        div = div + (values[1 + 2 * j][..., j] - values[2 + 2 * j][..., j])
    return values[0], div / (2.0 * e)


def field_with_divergence(fn, x, eps):
    """Evaluate a field and its central-difference divergence with a single call of ``fn``.

    ``fn`` maps (..., n, d) query points to displacements of the same
    shape, with the leading axes matching those of x.
    """
    pts = stencil(x, eps)
    s, m, d = pts.shape[0], x.shape[-2], x.shape[-1]
    flat = pts.movedim(0, -3).reshape(x.shape[:-2] + (s * m, d))
    vals = fn(flat).reshape(x.shape[:-2] + (s, m, d)).movedim(-3, 0)
    return split_stencil(vals, eps)


def _points_tensor(points):
    if isinstance(points, ParticleEnsemble):
        points = points.points
    if isinstance(points, torch.Tensor):
        return points
    return torch.tensor(np.asarray(points, dtype=np.float64))


def estimate_divergence(field, points, eps=None):
    if eps is None:
        eps = default_eps(_points_tensor(points))
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = _points_tensor(points)
    with torch.no_grad():
        _, div = field_with_divergence(_torch_fn(field), x, eps)
    vals = div.cpu().numpy()
    if not np.all(np.isfinite(vals)):
        bad = int(np.argwhere(~np.isfinite(vals))[0, 0])
        raise NumericError(f"non-finite divergence at particle {bad}", bad)
    return DivergenceEstimate(vals, float(eps))


def _torch_fn(field):
    return field.fn if isinstance(field, DisplacementField) else field


def _displacements(ensemble, field):
    x = torch.tensor(ensemble.points)
    with torch.no_grad():
        v = _torch_fn(field)(x)
    v = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v, dtype=np.float64)
    if v.shape != ensemble.points.shape:
        raise StructuralError(
            f"field returned shape {v.shape} for ensemble of shape {ensemble.points.shape}")
    if not np.all(np.isfinite(v)):
        bad = int(np.argwhere(~np.isfinite(v))[0, 0])
        raise NumericError(f"non-finite displacement at particle {bad}", bad)
    return v


def push(points, densities, displacement, div):
    """Move particles by a displacement and update densities with exp(-div)."""
    return points + displacement, densities * np.exp(-div)


def apply_map(ensemble, field, div):
    v = _displacements(ensemble, field)
    values = np.asarray(div.values if isinstance(div, DivergenceEstimate) else div)
    if values.shape != (ensemble.size,):
        raise StructuralError(f"divergence has shape {values.shape}, expected ({ensemble.size},)")
    pts, rho = push(ensemble.points, ensemble.densities, v, values)
    return ParticleEnsemble(pts, rho, step=ensemble.step + 1, meta=ensemble.meta)


def recenter(ensemble):
    pts = ensemble.points - ensemble.points.mean(axis=0)
    return ensemble.replace(points=pts)


def chamfer_distance(a, b):
    a = np.asarray(a.points if isinstance(a, ParticleEnsemble) else a, dtype=np.float64)
    b = np.asarray(b.points if isinstance(b, ParticleEnsemble) else b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise StructuralError("chamfer distance needs two non-empty (n, d) point sets")
    if a.shape[1] != b.shape[1]:
        raise StructuralError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return kernels.chamfer(a, b)


def displacement_cost(ensemble, field):
    v = _displacements(ensemble, field)
    return float(np.mean(np.sum(v * v, axis=1)))
