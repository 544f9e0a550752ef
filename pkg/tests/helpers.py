"""Small builders shared by the test modules."""

import numpy as np
import torch

from jkoflow.operator import NeuralJKO, OperatorConfig


def tiny_operator(dim=2, conditioning=(), seed=0, scale=0.3, **kw):
    """A small float64 operator whose output layer is randomized so the field is non-trivial."""
    cfg = OperatorConfig(dim=dim, embed_dim=8, heads=2, encoder_blocks=1, decoder_blocks=1,
                         lift_hidden=8, proj_hidden=8, ff_mult=1, conditioning=conditioning, **kw)
    op = NeuralJKO(cfg, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        last = op.proj[-1]
        last.weight.copy_(scale * torch.randn(last.weight.shape, generator=g, dtype=torch.float64))
        last.bias.copy_(0.1 * scale * torch.randn(last.bias.shape, generator=g, dtype=torch.float64))
    return op


def gaussian_ensemble(rng, m, d=2, scale=1.0):
    from jkoflow.geometry import ParticleEnsemble
    x = scale * rng.standard_normal((m, d))
    rho = np.exp(-0.5 * np.sum(x * x, 1) / scale ** 2) / (2 * np.pi * scale ** 2) ** (d / 2)
    return ParticleEnsemble(x, rho)
