import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import gaussian_ensemble, tiny_operator
from jkoflow.energy import gaussian_target
from jkoflow.geometry import ParticleEnsemble, StructuralError
from jkoflow.operator import Attention, Conditioning, NeuralJKO, OperatorConfig


def test_config_validation():
    with pytest.raises(ValueError):
        OperatorConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        OperatorConfig(conditioning=("colour",))
    with pytest.raises(ValueError):
        OperatorConfig(density_feature="sqrt")
    assert OperatorConfig(conditioning=["params_pq", "params_pq"]).conditioning == ("params_pq",)


def test_zero_init_gives_zero_field(rng):
    op = NeuralJKO(OperatorConfig(dim=2, embed_dim=16, heads=2))
    ens = gaussian_ensemble(rng, 20)
    out = op(ens, None, rng.standard_normal((7, 2)))
    assert torch.count_nonzero(out) == 0


def test_construction_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(5)
    before = torch.random.get_rng_state()
    a = NeuralJKO(OperatorConfig(), seed=3)
    assert torch.equal(torch.random.get_rng_state(), before)
    b = NeuralJKO(OperatorConfig(), seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2 ** 31 - 1))
def test_prompt_permutation_invariance(m, seed):
    rng = np.random.default_rng(seed)
    op = tiny_operator(conditioning=("density_values",))
    ens = gaussian_ensemble(rng, m)
    perm = rng.permutation(m)
    shuffled = ParticleEnsemble(ens.points[perm], ens.densities[perm])
    q = rng.standard_normal((5, 2))
    with torch.no_grad():
        a, b = op(ens, None, q), op(shuffled, None, q)
    assert torch.allclose(a, b, rtol=1e-12, atol=1e-13)


def test_queries_do_not_interact(rng):
    op = tiny_operator()
    ctx = op.encode(gaussian_ensemble(rng, 16))
    q = rng.standard_normal((9, 2))
    with torch.no_grad():
        together = op.query(ctx, q)
        alone = torch.cat([op.query(ctx, q[i:i + 1]) for i in range(9)])
    assert torch.allclose(together, alone, rtol=1e-12, atol=1e-14)


def test_single_point_prompt(rng):
    op = tiny_operator()
    out = op(ParticleEnsemble([[0.2, -0.1]], [1.0]), None, rng.standard_normal((4, 2)))
    assert out.shape == (4, 2) and torch.isfinite(out).all()


def test_variable_length_prompts(rng):
    op = tiny_operator()
    q = rng.standard_normal((3, 2))
    for m in (2, 17, 64):
        assert op(gaussian_ensemble(rng, m), None, q).shape == (3, 2)


def test_batch_field_matches_single_prompts(rng):
    op = tiny_operator(conditioning=("density_values",))
    ens = [gaussian_ensemble(rng, 12) for _ in range(3)]
    pts = torch.tensor(np.stack([e.points for e in ens]))
    rho = torch.tensor(np.stack([e.densities for e in ens]))
    q = torch.tensor(rng.standard_normal((3, 5, 2)))
    with torch.no_grad():
        batched = op.batch_field(pts, rho, [Conditioning()] * 3)(q)
        single = torch.stack([op(e, None, q[i]) for i, e in enumerate(ens)])
    assert torch.allclose(batched, single, rtol=1e-12, atol=1e-14)


def test_missing_conditioning_is_structural_error(rng):
    op = tiny_operator(conditioning=("params_pq",))
    with pytest.raises(StructuralError):
        op(gaussian_ensemble(rng, 4), Conditioning(), np.zeros((1, 2)))
    op = tiny_operator(dim=3)
    with pytest.raises(StructuralError):
        op(gaussian_ensemble(rng, 4), None, np.zeros((1, 3)))


def test_pq_and_target_conditioning_change_output(rng):
    op = tiny_operator(conditioning=("params_pq",))
    ens = gaussian_ensemble(rng, 8)
    q = rng.standard_normal((3, 2))
    with torch.no_grad():
        a = op(ens, Conditioning(pq=(0.5, 3.0)), q)
        b = op(ens, Conditioning(pq=(0.5, 6.0)), q)
    assert not torch.allclose(a, b)
    op = tiny_operator(conditioning=("density_values", "kl_target"))
    t1 = gaussian_target([0.0, 0.0], np.eye(2), 10, rng)
    t2 = gaussian_target([2.0, 0.0], np.eye(2), 10, rng)
    with torch.no_grad():
        a = op(ens, Conditioning(target=t1), q)
        b = op(ens, Conditioning(target=t2), q)
    assert not torch.allclose(a, b)


def dense_attention(att, xq, kv):
    """Explicit per-head softmax(QK^T / sqrt(d)) V with plain matrices."""
    W = lambda lin, x: x @ lin.weight.T + lin.bias
    q, k, v = W(att.wq, xq), W(att.wk, kv), W(att.wv, kv)
    hd = q.shape[-1] // att.heads
    heads = []
    for h in range(att.heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        w = torch.exp(scores - scores.max(1, keepdim=True).values)
        heads.append((w / w.sum(1, keepdim=True)) @ v[:, sl])
    return W(att.wo, torch.cat(heads, 1))


def test_attention_matches_dense_oracle():
    torch.manual_seed(0)
    att = Attention(16, 2).double()
    xq = torch.randn(5, 16, dtype=torch.float64)
    kv = torch.randn(11, 16, dtype=torch.float64)
    with torch.no_grad():
        assert torch.allclose(att(xq, kv), dense_attention(att, xq, kv), rtol=1e-12, atol=1e-13)


def test_field_is_smooth_enough_for_finite_differences(rng):
    op = tiny_operator()
    ens = gaussian_ensemble(rng, 10)
    ctx = op.encode(ens)
    x = torch.tensor(rng.standard_normal((4, 2)), requires_grad=True)
    jac = torch.autograd.functional.jacobian(lambda y: op.query_batch(ctx, y).sum(0), x)
    h = 1e-5
    for j in range(2):
        e = torch.zeros(2, dtype=torch.float64)
        e[j] = h
        with torch.no_grad():
            fd = (op.query_batch(ctx, x + e) - op.query_batch(ctx, x - e)) / (2 * h)
        assert torch.allclose(fd, jac[:, :, j].T, rtol=1e-6, atol=1e-9)
