"""Learn-to-Evolve training: self-generated trajectories and better-than-birth updates."""

from __future__ import annotations

import copy
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .energy import KL, Interaction, ParameterError, PorousInternal, energy_from_dict
from .geometry import NumericError, ParticleEnsemble, field_with_divergence, recenter
from .loss import (AccumulatedLoss, better_than_birth, decay_weights, prompt_eps,
                   state_losses, trajectory_step_losses)
from .operator import Conditioning, NeuralJKO, OperatorConfig
from .oracles import BarenblattSpec, barenblatt_sample

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid training or family configuration."""


class TrainingDiverged(RuntimeError):
    """Operator parameters became non-finite; ``last_good`` holds the parameters to keep."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


def rng_for(seed, outer, index, purpose):
    """Counter-based generator keyed by (seed, outer iteration, index, purpose tag)."""
    key = np.random.SeedSequence([int(seed), int(outer), int(index), zlib.crc32(purpose.encode())])
    return np.random.Generator(np.random.Philox(key))


# ---------------------------------------------------------------- families

FAMILY_KINDS = ("fixed", "uniform_box", "uniform_rect_tri", "barenblatt", "gaussian_mix")


@dataclass
class InitialFamilySpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ConfigError(f"unknown family kind {self.kind!r}; expected one of {FAMILY_KINDS}")
        p = self.params
        if self.kind == "barenblatt":
            lo, hi = p.get("C_range", (0.1, 1.0))
            if not 0 < lo <= hi:
                raise ConfigError(f"C_range must lie in (0, inf), got {p.get('C_range')}")
            if not p.get("t0", 1e-3) > 0:
                raise ConfigError("barenblatt t0 must be positive")
            if not p.get("m", 2.0) > 1:
                raise ConfigError("barenblatt exponent m must exceed 1")
        if self.kind == "gaussian_mix":
            lo, hi = p.get("std_range", (0.2, 0.9))
            if not 0 < lo <= hi:
                raise ConfigError(f"std_range must lie in (0, inf), got {p.get('std_range')}")
            kmin, kmax = p.get("components", (1, 1))
            if not 1 <= kmin <= kmax:
                raise ConfigError("components range must satisfy 1 <= min <= max")
        if self.kind == "uniform_box":
            if not p.get("low", -1.0) < p.get("high", 1.0):
                raise ConfigError("uniform_box needs low < high")
        if self.kind == "fixed" and "ensemble" not in p and "source" not in p and "path" not in p:
            raise ConfigError("fixed family needs an ensemble, a source family or a path")

    @property
    def dim(self):
        if self.kind == "fixed" and "ensemble" in self.params:
            return self.params["ensemble"].dim
        if self.kind == "fixed" and "source" in self.params:
            return family_from_dict(self.params["source"]).dim
        if self.kind == "uniform_rect_tri":
            return 2
        return int(self.params.get("dim", 2))

    def to_dict(self):
        params = {k: v for k, v in self.params.items() if k != "ensemble"}
        return {"kind": self.kind, **params}


def family_from_dict(d):
    d = dict(d)
    return InitialFamilySpec(d.pop("kind", None), d)


def uniform_rectangle(low, high, n, rng):
    low, high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    pts = low + (high - low) * rng.random((n, len(low)))
    return ParticleEnsemble(pts, np.full(n, 1.0 / np.prod(high - low)))


def uniform_triangle(vertices, n, rng):
    a, b, c = np.asarray(vertices, dtype=np.float64)
    u, v = rng.random(n), rng.random(n)
    su = np.sqrt(u)
    pts = (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c
    area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    return ParticleEnsemble(pts, np.full(n, 1.0 / area))


def _rect_or_triangle(params, n, rng):
    lo, hi = params.get("box", (-1.0, 1.0))
    min_side = params.get("min_side", 0.3)
    if "rect" in params:
        (x0, y0), (x1, y1) = params["rect"]
        return uniform_rectangle((x0, y0), (x1, y1), n, rng)
    shapes = params.get("shapes", ("rect", "tri"))
    shape = shapes[rng.integers(len(shapes))]
    while True:
        if shape == "rect":
            c = lo + (hi - lo) * rng.random((2, 2))
            a, b = c.min(0), c.max(0)
            if np.all(b - a >= min_side):
                return uniform_rectangle(a, b, n, rng)
        else:
            v = lo + (hi - lo) * rng.random((3, 2))
            area = 0.5 * abs((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1])
                             - (v[2, 0] - v[0, 0]) * (v[1, 1] - v[0, 1]))
            if area >= 0.5 * min_side ** 2:
                return uniform_triangle(v, n, rng)


def _gaussian_mix(params, n, rng):
    d = int(params.get("dim", 2))
    kmin, kmax = params.get("components", (1, 1))
    k = int(rng.integers(kmin, kmax + 1))
    lo, hi = params.get("mean_box", (-2.0, 2.0))
    slo, shi = params.get("std_range", (0.2, 0.9))
    means = lo + (hi - lo) * rng.random((k, d))
    stds = slo + (shi - slo) * rng.random(k)
    comp = rng.integers(k, size=n)
    pts = means[comp] + stds[comp, None] * rng.standard_normal((n, d))
    z = pts[:, None, :] - means[None]
    dens = np.mean(np.exp(-0.5 * np.sum(z * z, -1) / stds ** 2) / (2 * np.pi * stds ** 2) ** (d / 2), axis=1)
    return ParticleEnsemble(pts, dens, meta={"means": means.tolist(), "stds": stds.tolist()})


def _barenblatt(params, n, rng):
    lo, hi = params.get("C_range", (0.1, 1.0))
    C = lo + (hi - lo) * rng.random()
    spec = BarenblattSpec(float(params.get("m", 2.0)), int(params.get("dim", 1)), C,
                          float(params.get("t0", 1e-3)))
    ens = barenblatt_sample(spec, 0.0, n - int(params.get("landmarks", 0)), rng,
                            landmarks=int(params.get("landmarks", 0)),
                            landmark_radius=float(params.get("landmark_radius", 0.05)))
    if params.get("recenter", True):
        ens = recenter(ens)
    return ens.replace(meta={"C": C})


def _draw_one(family, n, rng):
    kind, p = family.kind, family.params
    if kind == "uniform_box":
        d = int(p.get("dim", 2))
        return uniform_rectangle([p.get("low", -1.0)] * d, [p.get("high", 1.0)] * d, n, rng)
    if kind == "uniform_rect_tri":
        return _rect_or_triangle(p, n, rng)
    if kind == "gaussian_mix":
        return _gaussian_mix(p, n, rng)
    if kind == "barenblatt":
        return _barenblatt(p, n, rng)
    raise ConfigError(f"cannot draw from family kind {kind!r}")


def _fixed_ensemble(family, n, seed):
    p = family.params
    if "ensemble" not in p:
        if "path" in p:
            p["ensemble"] = ParticleEnsemble.load(p["path"])
        else:
            src = family_from_dict(p["source"])
            p["ensemble"] = _draw_one(src, int(p.get("count", n)), rng_for(seed, 0, 0, "fixed"))
    return p["ensemble"]


# ------------------------------------------------------------------ energy

@dataclass
class EnergyChoice:
    """A fixed energy, or an interaction family with (p, q) drawn uniformly per trajectory."""

    spec: object = None
    p_range: tuple | None = None
    q_range: tuple | None = None

    @classmethod
    def from_dict(cls, d, rng=None):
        d = dict(d)
        if d.get("kind") == "interaction" and "p_range" in d:
            return cls(None, tuple(d["p_range"]), tuple(d["q_range"]))
        return cls(energy_from_dict(d, rng))

    def to_dict(self):
        if self.spec is None:
            return {"kind": "interaction", "p_range": list(self.p_range), "q_range": list(self.q_range)}
        return self.spec.to_dict()

    def draw(self, rng):
        if self.spec is not None:
            spec = self.spec
        else:
            p = rng.uniform(*self.p_range)
            q = rng.uniform(max(p, self.q_range[0]), self.q_range[1])
            spec = Interaction(float(p), float(q))
        cond = Conditioning(pq=(spec.p, spec.q) if isinstance(spec, Interaction) else None,
                            target=spec.target if isinstance(spec, KL) else None)
        return spec, cond


def sample_initials(family, count, rng, energy=None, n=256, seed=0):
    """Draw ``count`` initial ensembles with their conditioning records.

    Returns a list of (ensemble, conditioning, energy spec) triples; the
    energy spec is None when no energy choice is given.
    """
    if count < 1:
        raise ConfigError("need at least one initial density")
    out = []
    for _ in range(count):
        if family.kind == "fixed":
            ens = _fixed_ensemble(family, n, seed)
        else:
            ens = _draw_one(family, n, rng)
        spec, cond = energy.draw(rng) if energy is not None else (None, Conditioning())
        out.append((ens, cond, spec))
    return out


# ------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    states: list
    cond: Conditioning = field(default_factory=Conditioning)
    spec: object = None
    divergences: list = field(default_factory=list)
    error: str | None = None

    @property
    def num_steps(self):
        return len(self.states) - 1

    def with_spec(self, spec):
        return replace(self, spec=spec)

    def check_density_chain(self, rtol=1e-12):
        for t, div in enumerate(self.divergences):
            want = self.states[t].densities * np.exp(-div)
            if not np.allclose(self.states[t + 1].densities, want, rtol=rtol, atol=0):
                return False
        return all(self.states[t + 1].step == self.states[t].step + 1 for t in range(self.num_steps))


def generate_batch(op, initials, conds, T, specs=None):
    """Roll the operator forward T steps from each initial; all outputs are detached."""
    specs = specs or [None] * len(initials)
    trajs = [Trajectory([ens.replace(step=0)], c, s) for ens, c, s in zip(initials, conds, specs)]
    dtype = getattr(op, "dtype", torch.float64)
    for t in range(T):
        live = [b for b, tr in enumerate(trajs) if tr.error is None]
        if not live:
            break
        groups = {}
        for b in live:
            groups.setdefault(trajs[b].states[-1].points.shape, []).append(b)
        for members in groups.values():
            pts = torch.stack([torch.tensor(trajs[b].states[-1].points, dtype=dtype) for b in members])
            rho = torch.stack([torch.tensor(trajs[b].states[-1].densities, dtype=dtype) for b in members])
            with torch.no_grad():
                fn = op.batch_field(pts, rho, [trajs[b].cond for b in members])
                v, div = field_with_divergence(fn, pts, prompt_eps(pts))
            v = v.detach().cpu().numpy().astype(np.float64)
            div = div.detach().cpu().numpy().astype(np.float64)
            for i, b in enumerate(members):
                st = trajs[b].states[-1]
                new_pts = st.points + v[i]
                new_rho = st.densities * np.exp(-div[i])
                ok = np.isfinite(new_pts).all(axis=1) & np.isfinite(new_rho) & np.isfinite(div[i])
                if not ok.all() or not np.any(new_rho > 0):
                    bad = int(np.argmin(ok)) if not ok.all() else 0
                    trajs[b].error = f"non-finite state at step {t + 1}, particle {bad}"
                    log.warning("trajectory %d truncated: %s", b, trajs[b].error)
                    continue
                trajs[b].states.append(ParticleEnsemble(new_pts, new_rho, step=st.step + 1, meta=st.meta))
                trajs[b].divergences.append(div[i])
    return trajs


def generate_trajectory(op, initial, cond=None, T=1, dt=None, spec=None):
    """Apply the operator T times from ``initial``; ``dt`` is implied by the operator."""
    return generate_batch(op, [initial], [cond or Conditioning()], T, [spec])[0]


# --------------------------------------------------------------- schedules

def lr_at(schedule, S):
    if S < 0:
        raise ValueError("inner-step counter must be nonnegative")
    sched = dict(schedule)
    kind = sched.get("schedule", sched.get("id"))
    if kind == "constant":
        return float(sched.get("value", 1e-4))
    if kind == "piecewise":
        hi, mid, lo = sched.get("values", (1e-4, 1e-5, 1e-6))
        b1, b2, b3 = sched.get("breaks", (3000, 6000, 10000))
        if S <= b1:
            return hi + (mid - hi) * S / b1
        if S <= b2:
            return mid
        if S <= b3:
            return mid + (lo - mid) * (S - b2) / (b3 - b2)
        return lo
    if kind == "cosine":
        top, bottom = sched.get("max", 1e-4), sched.get("min", 1e-5)
        horizon = max(int(sched.get("steps", 1)), 1)
        frac = min(S / horizon, 1.0)
        return bottom + 0.5 * (top - bottom) * (1 + math.cos(math.pi * frac))
    raise ConfigError(f"unknown learning-rate schedule {kind!r}")


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    dt: float
    T: int
    family: InitialFamilySpec
    energy: EnergyChoice
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    B: int = 2
    K0: int = 50
    S_in: int = 50
    S_max: int = 2000
    decay: float = 1.0
    seed: int = 0
    particles: int = 256
    lr: dict = field(default_factory=lambda: {"schedule": "constant", "value": 1e-4})
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    resample_points: bool = True
    checkpoint_every: int = 0
    mode: str = "learn_to_evolve"
    baseline_data: str = ""

    def __post_init__(self):
        checks = {"dt": self.dt > 0, "T": self.T >= 1, "B": self.B >= 1, "K0": self.K0 >= 0,
                  "S_in": self.S_in >= 1, "S_max": self.S_max >= 1,
                  "decay": 0 < self.decay <= 1, "particles": self.particles >= 1,
                  "mode": self.mode in ("learn_to_evolve", "baseline")}
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid value for {key!r}: {getattr(self, key)!r}")
        lr_at(self.lr_schedule, 0)

    @property
    def lr_schedule(self):
        sched = dict(self.lr)
        sched.setdefault("steps", self.S_max)
        return sched

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("dt", "T", "B", "K0", "S_in", "S_max", "decay", "seed",
                                            "particles", "weight_decay", "grad_clip",
                                            "resample_points", "checkpoint_every", "mode",
                                            "baseline_data")}
        d["betas"] = list(self.betas)
        d["lr"] = dict(self.lr)
        d["family"] = self.family.to_dict()
        d["energy"] = self.energy.to_dict()
        d["operator"] = self.operator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = copy.deepcopy(d)
        for key in ("dt", "T", "family", "energy"):
            if key not in d:
                raise ConfigError(f"missing required key {key!r}")
        family = family_from_dict(d.pop("family"))
        seed = int(d.get("seed", 0))
        try:
            energy = EnergyChoice.from_dict(d.pop("energy"), rng_for(seed, 0, 0, "target"))
        except (KeyError, ParameterError) as exc:
            raise ConfigError(f"invalid energy: {exc}") from exc
        op = dict(d.pop("operator", {}))
        op.setdefault("dim", family.dim)
        if "conditioning" not in op:
            op["conditioning"] = default_conditioning(energy)
        try:
            operator = OperatorConfig(**op)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid operator config: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        try:
            return cls(family=family, energy=energy, operator=operator, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def default_conditioning(energy):
    if energy.spec is None:
        return ["params_pq"]
    if isinstance(energy.spec, KL):
        return ["density_values", "kl_target"]
    if isinstance(energy.spec, PorousInternal):
        return ["density_values"]
    return []


# ----------------------------------------------------------------- trainer

@dataclass
class TrainState:
    outer: int = 0
    S: int = 0


def _params_finite(op):
    return all(torch.isfinite(p).all() for p in op.parameters())


def make_optimizer(op, config):
    return torch.optim.AdamW(op.parameters(), lr=lr_at(config.lr_schedule, 0),
                             betas=tuple(config.betas), weight_decay=config.weight_decay)


def _gradient_step(op, opt, loss, config, S):
    lr = lr_at(config.lr_schedule, S)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(op.parameters(), config.grad_clip)
    opt.step()
    return lr


def _mean_loss(steps, decay):
    """Decay-weighted mean over the valid (finite) entries of a (B, T) loss tensor."""
    w = decay_weights(steps.shape[1], decay, steps.dtype).expand_as(steps)
    valid = torch.isfinite(steps)
    safe = torch.where(valid, steps, torch.zeros_like(steps))
    return (w * safe).sum() / valid.sum().clamp(min=1)


def _ledger_rows(outer, inner, tr, en, lr):
    rows = []
    tr, en = tr.detach().numpy(), en.detach().numpy()
    for b in range(tr.shape[0]):
        for t in range(tr.shape[1]):
            if np.isfinite(tr[b, t]):
                rows.append((outer, inner, b, t, tr[b, t], en[b, t], tr[b, t] + en[b, t], lr))
    return rows


class Trainer:
    """Runs the outer/inner loop; hooks receive events, ledger rows and checkpoints."""

    def __init__(self, config, op=None, on_event=None, on_ledger=None, on_checkpoint=None):
        self.config = config
        self.op = op if op is not None else NeuralJKO(config.operator, seed=config.seed)
        self.opt = make_optimizer(self.op, config)
        self.state = TrainState()
        self.events = []
        self.on_event = on_event
        self.on_ledger = on_ledger
        self.on_checkpoint = on_checkpoint
        self._fixed_batch = None

    def emit(self, **record):
        self.events.append(record)
        if self.on_event:
            self.on_event(record)

    def _batch(self, outer):
        c = self.config
        if not c.resample_points and self._fixed_batch is not None:
            return self._fixed_batch
        draw_outer = outer if c.resample_points else 0
        batch = sample_initials(c.family, c.B, rng_for(c.seed, draw_outer, 0, "initials"),
                                c.energy, n=c.particles, seed=c.seed)
        if not c.resample_points:
            self._fixed_batch = batch
        return batch

    def _snapshot(self):
        return copy.deepcopy(self.op.state_dict()), copy.deepcopy(self.opt.state_dict())

    def _restore(self, snap):
        self.op.load_state_dict(snap[0])
        self.opt.load_state_dict(snap[1])

    def _checkpoint(self):
        if self.on_checkpoint:
            self.on_checkpoint(self)

    def run(self):
        c = self.config
        st = self.state
        while st.S < c.S_max:
            k = st.outer
            snap = self._snapshot()
            batch = self._batch(k)
            trajs = generate_batch(self.op, [b[0] for b in batch], [b[1] for b in batch], c.T,
                                   [b[2] for b in batch])
            s_in = 1 if k < c.K0 else c.S_in
            s = 0
            reference = None
            final = None
            while True:
                can_step = s < s_in and st.S < c.S_max
                with torch.set_grad_enabled(can_step):
                    tr, en = trajectory_step_losses(self.op, trajs, c.dt)
                steps = tr + en
                acc = AccumulatedLoss.from_steps(steps.detach().numpy())
                if s == 0:
                    reference = acc
                    self.emit(event="regen", outer=k, S=st.S,
                              truncated=sum(tr_.error is not None for tr_ in trajs),
                              reference=acc.matrix.tolist())
                elif better_than_birth(acc, reference):
                    final = acc
                    reason = "btb"
                    break
                if not can_step:
                    reason = "sin_cap" if s >= s_in else "smax_cap"
                    break
                loss = _mean_loss(steps, c.decay)
                lr = _gradient_step(self.op, self.opt, loss, c, st.S)
                if not _params_finite(self.op):
                    self._restore(snap)
                    self.emit(event="stop", outer=k, inner=s, S=st.S, reason="diverged")
                    raise TrainingDiverged(f"non-finite parameters at outer {k}, inner step {s}",
                                           snap[0])
                if self.on_ledger:
                    self.on_ledger(_ledger_rows(k, s, tr, en, lr))
                s += 1
                st.S += 1
                self.emit(event="inner", outer=k, inner=s, S=st.S, loss=float(loss.detach()), lr=lr)
            self.emit(event="stop", outer=k, inner=s, S=st.S, reason=reason,
                      final=None if final is None else final.matrix.tolist())
            st.outer += 1
            if c.checkpoint_every and st.outer % c.checkpoint_every == 0 and st.S < c.S_max:
                self._checkpoint()
        self._checkpoint()
        return self.op, self.events


def learn_to_evolve(config, op=None, **hooks):
    return Trainer(config, op=op, **hooks).run()


def train_baseline(config, dataset, op=None, on_event=None, on_ledger=None, on_checkpoint=None):
    """Same optimizer and budget as Learn-to-Evolve, but on a frozen set of states.

    ``dataset`` is a list of (ensemble, conditioning, energy spec) triples;
    every state serves as a JKO input at every step.
    """
    trainer = Trainer(config, op=op, on_event=on_event, on_ledger=on_ledger, on_checkpoint=on_checkpoint)
    c = config
    trajs = [Trajectory([ens, ens], cond, spec) for ens, cond, spec in dataset]
    st = trainer.state
    while st.S < c.S_max:
        snap = trainer._snapshot()
        tr, en = trajectory_step_losses(trainer.op, trajs, c.dt)
        loss = _mean_loss(tr + en, 1.0)
        lr = _gradient_step(trainer.op, trainer.opt, loss, c, st.S)
        if not _params_finite(trainer.op):
            trainer._restore(snap)
            raise TrainingDiverged(f"non-finite parameters at step {st.S}", snap[0])
        if on_ledger:
            on_ledger(_ledger_rows(0, st.S, tr, en, lr))
        st.S += 1
        trainer.emit(event="inner", outer=0, inner=st.S, S=st.S, loss=float(loss.detach()), lr=lr)
    trainer.emit(event="stop", outer=0, inner=st.S, S=st.S, reason="smax_cap", final=None)
    trainer._checkpoint()
    return trainer.op
