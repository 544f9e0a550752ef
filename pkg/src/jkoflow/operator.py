"""Attention-based neural JKO operator.

The prompt (sample points of the input density, optionally with density
values, interaction parameters and target samples) is lifted pointwise and
encoded with self-attention blocks. Displacements at arbitrary query
points are decoded with cross-attention against the encoded prompt, so
queries never attend to each other and off-sample points (the
finite-difference stencil) are handled the same way as sample points.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .geometry import DisplacementField, StructuralError

CHANNELS = ("params_pq", "density_values", "kl_target")

DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass
class OperatorConfig:
    dim: int = 2
    embed_dim: int = 64
    heads: int = 4
    encoder_blocks: int = 2
    decoder_blocks: int = 1
    lift_hidden: int = 64
    proj_hidden: int = 64
    ff_mult: int = 2
    conditioning: tuple = ()
    position_scale: float = 1.0
    density_feature: str = "raw"
    output_scale: float = 1.0
    dtype: str = "float64"

    def __post_init__(self):
        self.conditioning = tuple(sorted(set(self.conditioning)))
        unknown = set(self.conditioning) - set(CHANNELS)
        if unknown:
            raise ValueError(f"unknown conditioning channels {sorted(unknown)}")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be a positive multiple of heads {self.heads}")
        if self.encoder_blocks < 1 or self.decoder_blocks < 1:
            raise ValueError("need at least one encoder and one decoder block")
        if self.density_feature not in ("raw", "log"):
            raise ValueError(f"density_feature must be 'raw' or 'log', got {self.density_feature!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def to_dict(self):
        d = asdict(self)
        d["conditioning"] = list(self.conditioning)
        return d

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


@dataclass
class Conditioning:
    """Per-prompt conditioning record: interaction parameters and/or a KL target."""

    pq: tuple | None = None
    target: object | None = None


def mlp(n_in, hidden, n_out):
    return nn.Sequential(nn.Linear(n_in, hidden), nn.SiLU(), nn.Linear(hidden, n_out))


class Attention(nn.Module):
    def __init__(self, h, heads):
        super().__init__()
        self.heads = heads
        self.wq = nn.Linear(h, h)
        self.wk = nn.Linear(h, h)
        self.wv = nn.Linear(h, h)
        self.wo = nn.Linear(h, h)

    def split(self, t):
        return t.reshape(t.shape[:-1] + (self.heads, -1)).transpose(-2, -3)

    def keys_values(self, kv):
        return self.split(self.wk(kv)), self.split(self.wv(kv))

    def attend(self, xq, k, v):
        q = self.split(self.wq(xq))
        out = nn.functional.scaled_dot_product_attention(q, k, v).transpose(-2, -3)
        return self.wo(out.reshape(out.shape[:-2] + (-1,)))

    def forward(self, xq, kv):
        return self.attend(xq, *self.keys_values(kv))


class SelfBlock(nn.Module):
    def __init__(self, h, heads, ff_mult):
        super().__init__()
        self.norm1 = nn.LayerNorm(h)
        self.attn = Attention(h, heads)
        self.norm2 = nn.LayerNorm(h)
        self.ff = mlp(h, ff_mult * h, h)

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y)
        return x + self.ff(self.norm2(x))


class CrossBlock(nn.Module):
    def __init__(self, h, heads, ff_mult):
        super().__init__()
        self.norm_q = nn.LayerNorm(h)
        self.norm_kv = nn.LayerNorm(h)
        self.attn = Attention(h, heads)
        self.norm2 = nn.LayerNorm(h)
        self.ff = mlp(h, ff_mult * h, h)

    def memory(self, ctx):
        return self.attn.keys_values(self.norm_kv(ctx))

    def forward(self, x, mem):
        x = x + self.attn.attend(self.norm_q(x), *mem)
        return x + self.ff(self.norm2(x))


@dataclass
class EncodedContext:
    states: torch.Tensor
    memory: list = field(default_factory=list)

    @property
    def length(self):
        return self.states.shape[-2]


class NeuralJKO(nn.Module):
    """Displacement operator ``(prompt, query points) -> displacements``."""

    def __init__(self, config: OperatorConfig, seed=0):
        super().__init__()
        self.config = config
        c = config
        n_in = c.dim + (2 if "params_pq" in c.conditioning else 0) + (
            1 if "density_values" in c.conditioning else 0)
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.lift = mlp(n_in, c.lift_hidden, c.embed_dim)
            self.target_lift = mlp(c.dim + 1, c.lift_hidden, c.embed_dim) if "kl_target" in c.conditioning else None
            self.encoder = nn.ModuleList(SelfBlock(c.embed_dim, c.heads, c.ff_mult)
                                         for _ in range(c.encoder_blocks))
            self.query_lift = mlp(c.dim, c.lift_hidden, c.embed_dim)
            self.decoder = nn.ModuleList(CrossBlock(c.embed_dim, c.heads, c.ff_mult)
                                         for _ in range(c.decoder_blocks))
            self.proj = mlp(c.embed_dim, c.proj_hidden, c.dim)
        finally:
            torch.random.set_rng_state(gen_state)
        # identity map at initialization
        nn.init.zeros_(self.proj[-1].weight)
        nn.init.zeros_(self.proj[-1].bias)
        self.to(c.torch_dtype)

    @property
    def dtype(self):
        return self.config.torch_dtype

    def _density_feature(self, rho):
        if self.config.density_feature == "log":
            return torch.log(rho)
        return rho

    def encode_batch(self, points, densities=None, pq=None, target_points=None, target_densities=None):
        """Encode prompts of shape (..., m, d); conditioning tensors share the leading shape."""
        c = self.config
        if points.shape[-1] != c.dim:
            raise StructuralError(f"operator expects dimension {c.dim}, prompt has {points.shape[-1]}")
        feats = [points * c.position_scale]
        if "params_pq" in c.conditioning:
            if pq is None:
                raise StructuralError("operator is conditioned on (p, q) but none was given")
            pq = torch.as_tensor(pq, dtype=points.dtype)
            feats.append(pq.unsqueeze(-2).expand(points.shape[:-1] + (2,)))
        if "density_values" in c.conditioning:
            if densities is None:
                raise StructuralError("operator is conditioned on density values but none were given")
            feats.append(self._density_feature(densities).unsqueeze(-1))
        x = self.lift(torch.cat(feats, dim=-1))
        if self.target_lift is not None:
            if target_points is None or target_densities is None:
                raise StructuralError("operator is conditioned on a KL target but none was given")
            y = torch.cat([target_points * c.position_scale,
                           self._density_feature(target_densities).unsqueeze(-1)], dim=-1)
            x = torch.cat([x, self.target_lift(y)], dim=-2)
        for block in self.encoder:
            x = block(x)
        return EncodedContext(x, [blk.memory(x) for blk in self.decoder])

    def query_batch(self, ctx, x):
        """Displacements at query points (..., n, d), leading shape matching the context."""
        if x.shape[-1] != self.config.dim:
            raise StructuralError(f"operator expects dimension {self.config.dim}, queries have {x.shape[-1]}")
        h = self.query_lift(x * self.config.position_scale)
        for block, mem in zip(self.decoder, ctx.memory):
            h = block(h, mem)
        return self.proj(h) * self.config.output_scale

    def batch_field(self, points, densities, conds):
        """Operator view used by the loss and trajectory generation.

        ``points`` (N, m, d), ``densities`` (N, m) and one :class:`Conditioning`
        per prompt. Returns ``fn`` mapping (N, n, d) queries to displacements.
        """
        pq = tp = td = None
        if "params_pq" in self.config.conditioning:
            pq = torch.tensor([list(c.pq) for c in conds], dtype=points.dtype)
        if "kl_target" in self.config.conditioning:
            tp = torch.stack([torch.tensor(c.target.points, dtype=points.dtype) for c in conds])
            td = torch.stack([torch.tensor(c.target.densities, dtype=points.dtype) for c in conds])
        ctx = self.encode_batch(points, densities, pq, tp, td)
        return lambda q: self.query_batch(ctx, q)

    # ensemble-level API

    def _prompt_tensors(self, prompt, cond):
        cond = cond or Conditioning()
        pts = torch.tensor(prompt.points, dtype=self.dtype)
        rho = torch.tensor(prompt.densities, dtype=self.dtype)
        return pts, rho, cond

    def encode(self, prompt, cond=None):
        pts, rho, cond = self._prompt_tensors(prompt, cond)
        fn_pq = None if cond.pq is None else torch.tensor(list(cond.pq), dtype=self.dtype)
        tp = td = None
        if cond.target is not None:
            tp = torch.tensor(cond.target.points, dtype=self.dtype)
            td = torch.tensor(cond.target.densities, dtype=self.dtype)
        return self.encode_batch(pts, rho, fn_pq, tp, td)

    def query(self, ctx, points):
        x = torch.as_tensor(np.asarray(points) if not isinstance(points, torch.Tensor) else points,
                            dtype=self.dtype)
        return self.query_batch(ctx, x)

    def field(self, prompt, cond=None):
        ctx = self.encode(prompt, cond)
        return DisplacementField(lambda x: self.query_batch(ctx, x.to(self.dtype)), dim=self.config.dim)

    def forward(self, prompt, cond, query_points):
        return self.query(self.encode(prompt, cond), query_points)


class FieldOperator(nn.Module):
    """Operator view over a prompt-independent field; used for stubs and oracles."""

    def __init__(self, field):
        super().__init__()
        self._field = field

    def batch_field(self, points, densities, conds):
        fn = self._field.fn if isinstance(self._field, DisplacementField) else self._field
        return fn

    def field(self, prompt, cond=None):
        return self._field if isinstance(self._field, DisplacementField) else DisplacementField(self._field)


class LinearOperator(nn.Module):
    """Trainable prompt-independent affine displacement V(x) = x A^T + b, zero at start."""

    def __init__(self, dim, dtype=torch.float64):
        super().__init__()
        self.A = nn.Parameter(torch.zeros(dim, dim, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def _fn(self, x):
        return x @ self.A.T + self.b

    def batch_field(self, points, densities, conds):
        return self._fn

    def field(self, prompt, cond=None):
        return DisplacementField(self._fn, dim=self.A.shape[0])
