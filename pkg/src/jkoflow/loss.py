"""One-step JKO objective on particles and its aggregations over trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .energy import Interaction, needs_divergence, pair_kernel_energy, pushed_energy
from .geometry import NumericError, StructuralError, default_eps, field_with_divergence
from .operator import Conditioning


@dataclass
class StepLossBreakdown:
    transport: torch.Tensor
    energy: torch.Tensor

    @property
    def total(self):
        return self.transport + self.energy

    def as_floats(self):
        return float(self.transport), float(self.energy), float(self.total)


@dataclass
class AccumulatedLoss:
    """Row b, column t holds the sum of the one-step losses of trajectory b up to state t."""

    matrix: np.ndarray

    @classmethod
    def from_steps(cls, steps):
        return cls(np.cumsum(np.asarray(steps, dtype=np.float64), axis=1))

    @property
    def shape(self):
        return self.matrix.shape


def prompt_eps(points):
    """Per-prompt finite-difference step: 1e-3 times the bounding-box diagonal."""
    diag = (points.amax(-2) - points.amin(-2)).norm(dim=-1)
    return torch.where(diag > 0, 1e-3 * diag, torch.full_like(diag, 1e-3))


def _energies(specs, y, rho, div):
    if all(isinstance(s, Interaction) for s in specs):
        p = torch.tensor([s.p for s in specs], dtype=y.dtype).reshape(-1, 1, 1)
        q = torch.tensor([s.q for s in specs], dtype=y.dtype).reshape(-1, 1, 1)
        return pair_kernel_energy(y, p, q)
    zero = torch.zeros_like(rho) if div is None else div
    return torch.stack([pushed_energy(s, y[i], rho[i], zero[i]) for i, s in enumerate(specs)])


def state_losses(op, points, densities, conds, specs, dt, eps=None):
    """Transport and 2*dt*energy terms for a stack of states.

    ``points`` (N, m, d) and ``densities`` (N, m) are treated as constants;
    gradients flow only through the operator's displacement field.
    """
    fn = op.batch_field(points, densities, conds)
    if any(needs_divergence(s) for s in specs):
        if eps is None:
            eps = prompt_eps(points)
        v, div = field_with_divergence(fn, points, eps)
    else:
        v, div = fn(points), None
    transport = (v * v).sum(-1).mean(-1)
    energy = 2.0 * dt * _energies(specs, points + v, densities, div)
    return transport, energy


def jko_step_loss(op, ensemble, spec, dt, cond=None, eps=None):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    dtype = getattr(op, "dtype", torch.float64)
    pts = torch.tensor(ensemble.points, dtype=dtype).unsqueeze(0)
    rho = torch.tensor(ensemble.densities, dtype=dtype).unsqueeze(0)
    if eps is not None:
        eps = torch.as_tensor([eps], dtype=dtype)
    transport, energy = state_losses(op, pts, rho, [cond or Conditioning()], [spec], dt, eps)
    if not (torch.isfinite(transport).all() and torch.isfinite(energy).all()):
        raise NumericError(f"non-finite JKO loss at step {ensemble.step}")
    return StepLossBreakdown(transport[0], energy[0])


def trajectory_step_losses(op, trajs, dt):
    """Per-step losses of a batch of trajectories as a (B, T) tensor, differentiable.

    Trajectories with fewer than T successors (truncated during generation)
    get NaN in the missing slots.
    """
    lengths = [traj.num_steps for traj in trajs]
    T = max(lengths)
    pts, rho, conds, specs, where = [], [], [], [], []
    dtype = getattr(op, "dtype", torch.float64)
    for b, traj in enumerate(trajs):
        for t in range(traj.num_steps):
            st = traj.states[t]
            pts.append(torch.tensor(st.points, dtype=dtype))
            rho.append(torch.tensor(st.densities, dtype=dtype))
            conds.append(traj.cond)
            specs.append(traj.spec)
            where.append((b, t))
    sizes = {p.shape for p in pts}
    out_t = torch.full((len(trajs), T), float("nan"), dtype=dtype)
    out_e = torch.full((len(trajs), T), float("nan"), dtype=dtype)
    if not pts:
        return out_t, out_e
    if len(sizes) == 1:
        tr, en = state_losses(op, torch.stack(pts), torch.stack(rho), conds, specs, dt)
    else:
        parts = [state_losses(op, p[None], r[None], [c], [s], dt)
                 for p, r, c, s in zip(pts, rho, conds, specs)]
        tr = torch.cat([a for a, _ in parts])
        en = torch.cat([b for _, b in parts])
    idx_b = torch.tensor([w[0] for w in where])
    idx_t = torch.tensor([w[1] for w in where])
    out_t = out_t.index_put((idx_b, idx_t), tr)
    out_e = out_e.index_put((idx_b, idx_t), en)
    return out_t, out_e


def decay_weights(T, decay, dtype=torch.float64):
    if not 0 < decay <= 1:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    return decay ** torch.arange(T, dtype=dtype)


def trajectory_loss(op, traj, spec=None, dt=None, decay=1.0):
    if spec is not None and spec is not traj.spec:
        traj = traj.with_spec(spec)
    tr, en = trajectory_step_losses(op, [traj], dt)
    steps = (tr + en)[0]
    return (decay_weights(len(steps), decay, steps.dtype) * steps).sum()


def weighted_step_sum(steps, decay=1.0):
    """Sum of decay**t * loss_t; plain arithmetic helper shared with the trainer."""
    steps = torch.as_tensor(steps)
    return (decay_weights(steps.shape[-1], decay, steps.dtype) * steps).sum(-1)


def accumulated_loss(op, trajs, spec=None, dt=None):
    lengths = {traj.num_steps for traj in trajs}
    if len(lengths) != 1:
        raise StructuralError(f"trajectories have ragged lengths {sorted(lengths)}")
    if spec is not None:
        trajs = [traj.with_spec(spec) for traj in trajs]
    with torch.no_grad():
        tr, en = trajectory_step_losses(op, trajs, dt)
    return AccumulatedLoss.from_steps((tr + en).numpy())


def better_than_birth(candidate, reference):
    c = candidate.matrix if isinstance(candidate, AccumulatedLoss) else np.asarray(candidate)
    r = reference.matrix if isinstance(reference, AccumulatedLoss) else np.asarray(reference)
    if c.shape != r.shape:
        raise StructuralError(f"accumulated-loss shapes differ: {c.shape} vs {r.shape}")
    return bool(np.all(c <= r))
