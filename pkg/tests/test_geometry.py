import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from jkoflow.geometry import (DisplacementField, NumericError, ParticleEnsemble, StructuralError,
                              apply_map, chamfer_distance, default_eps, displacement_cost,
                              estimate_divergence, linear_field, recenter, zero_field)


def gaussian_ensemble(rng, m=200, d=2):
    x = rng.standard_normal((m, d))
    rho = np.exp(-0.5 * (x * x).sum(1)) / (2 * np.pi) ** (d / 2)
    return ParticleEnsemble(x, rho)


def brute_chamfer(a, b):
    total = 0.0
    for x in a:
        total += min(float(np.sum((x - y) ** 2)) for y in b)
    for y in b:
        total += min(float(np.sum((x - y) ** 2)) for x in a)
    return total


# ensemble validation

def test_ensemble_rejects_length_mismatch():
    with pytest.raises(StructuralError):
        ParticleEnsemble(np.zeros((3, 2)), np.ones(2))


def test_ensemble_rejects_negative_density_with_index():
    with pytest.raises(NumericError) as exc:
        ParticleEnsemble(np.zeros((3, 2)), [1.0, -1.0, 1.0])
    assert exc.value.index == 1


def test_ensemble_rejects_nonfinite_point():
    pts = np.zeros((4, 2))
    pts[2, 1] = np.nan
    with pytest.raises(NumericError) as exc:
        ParticleEnsemble(pts, np.ones(4))
    assert exc.value.index == 2


def test_ensemble_rejects_all_zero_densities():
    with pytest.raises(NumericError):
        ParticleEnsemble(np.zeros((2, 1)), np.zeros(2))


def test_ensemble_arrays_are_read_only(rng):
    ens = gaussian_ensemble(rng)
    with pytest.raises(ValueError):
        ens.points[0, 0] = 1.0


finite = st.floats(-1e6, 1e6, allow_nan=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 20), st.integers(0, 50), st.data())
def test_text_round_trip(d, m, step, data):
    pts = data.draw(arrays(np.float64, (m, d), elements=finite))
    rho = data.draw(arrays(np.float64, (m,), elements=st.floats(1e-300, 1e6, width=64)))
    ens = ParticleEnsemble(pts, rho, step=step)
    back = ParticleEnsemble.from_text(ens.to_text())
    assert back == ens


def test_text_header_format():
    ens = ParticleEnsemble([[0.5, 1.0]], [2.0], step=3)
    assert ens.to_text().splitlines()[0] == "dim=2 count=1 step=3"


def test_text_rejects_wrong_count():
    with pytest.raises(StructuralError):
        ParticleEnsemble.from_text("dim=1 count=2 step=0\n0.0 1.0\n")


# apply_map

def test_apply_map_zero_field_is_identity(rng):
    ens = gaussian_ensemble(rng)
    f = zero_field(2)
    out = apply_map(ens, f, estimate_divergence(f, ens))
    assert np.array_equal(out.points, ens.points)
    assert np.array_equal(out.densities, ens.densities)
    assert out.step == ens.step + 1


def test_apply_map_translation_keeps_densities(rng):
    ens = gaussian_ensemble(rng)
    f = linear_field(np.zeros((2, 2)), [0.3, -0.2])
    out = apply_map(ens, f, estimate_divergence(f, ens))
    assert np.allclose(out.points, ens.points + [0.3, -0.2], atol=1e-15)
    assert np.array_equal(out.densities, ens.densities)


def test_apply_map_isotropic_scaling_matches_change_of_variables(rng):
    delta = 0.01
    ens = gaussian_ensemble(rng)
    f = linear_field(delta * np.eye(2))
    out = apply_map(ens, f, estimate_divergence(f, ens))
    exact = ens.densities * (1 + delta) ** -2
    assert np.allclose(out.densities, ens.densities * np.exp(-2 * delta), rtol=1e-12)
    assert np.max(np.abs(out.densities - exact) / ens.densities) <= 3 * delta ** 2


def test_apply_map_leaves_input_untouched(rng):
    ens = gaussian_ensemble(rng)
    before = ens.points.copy()
    f = linear_field(0.1 * np.eye(2))
    apply_map(ens, f, estimate_divergence(f, ens))
    assert np.array_equal(ens.points, before)


def test_apply_map_inverse_linear_restores_densities(rng):
    delta = 0.02
    ens = gaussian_ensemble(rng)
    fwd = linear_field(delta * np.eye(2))
    mid = apply_map(ens, fwd, estimate_divergence(fwd, ens))
    back = linear_field((1 / (1 + delta) - 1) * np.eye(2))
    out = apply_map(mid, back, estimate_divergence(back, mid))
    assert np.allclose(out.points, ens.points, atol=1e-12)
    assert np.max(np.abs(out.densities / ens.densities - 1)) <= 3 * delta ** 2


def test_apply_map_dimension_mismatch():
    ens = ParticleEnsemble(np.zeros((3, 2)), np.ones(3))
    bad = DisplacementField(lambda x: torch.zeros(x.shape[0], 3))
    with pytest.raises(StructuralError):
        apply_map(ens, bad, np.zeros(3))


def test_apply_map_nonfinite_displacement_names_index():
    ens = ParticleEnsemble(np.arange(6.0).reshape(3, 2), np.ones(3))

    def fn(x):
        v = torch.zeros_like(x)
        v[1, 0] = float("inf")
        return v

    with pytest.raises(NumericError) as exc:
        apply_map(ens, DisplacementField(fn), np.zeros(3))
    assert exc.value.index == 1


# divergence

def test_divergence_identity_field_exact():
    x = np.random.default_rng(0).standard_normal((30, 3))
    div = estimate_divergence(linear_field(np.eye(3)), x)
    assert np.allclose(div.values, 3.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (3,), elements=st.floats(-2, 2)),
       st.floats(1e-4, 1.0))
def test_divergence_exact_on_affine_fields(A, b, eps):
    x = np.random.default_rng(1).standard_normal((10, 3))
    div = estimate_divergence(linear_field(A, b), x, eps=eps)
    assert np.allclose(div.values, np.trace(A), atol=1e-9)


def test_divergence_quadratic_field():
    f = DisplacementField(lambda x: x * x)
    div = estimate_divergence(f, np.array([[1.0, 1.0]]), eps=1e-3)
    assert abs(div.values[0] - 4.0) <= 1e-6


def test_divergence_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        estimate_divergence(zero_field(2), np.zeros((2, 2)), eps=0.0)


def test_divergence_nonfinite_raises():
    f = DisplacementField(lambda x: torch.log(x))
    with pytest.raises(NumericError):
        estimate_divergence(f, np.array([[1.0], [0.0]]), eps=1e-3)


def test_default_eps_scales_with_bounding_box():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert default_eps(x) == pytest.approx(5e-3)


# recenter

def test_recenter_symmetric_cloud_unchanged():
    x = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
    out = recenter(ParticleEnsemble(x, np.ones(4)))
    assert np.allclose(out.points, x, atol=1e-15)


def test_recenter_single_support():
    out = recenter(ParticleEnsemble(np.tile([3.0, -1.0], (5, 1)), np.ones(5)))
    assert np.all(out.points == 0.0)


def test_recenter_uniform_square(rng):
    ens = ParticleEnsemble(2 * rng.random((500, 2)), np.full(500, 0.25))
    out = recenter(ens)
    assert np.all(np.abs(out.points.mean(0)) <= 1e-12)
    assert np.array_equal(out.densities, ens.densities)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 3)),
              elements=st.floats(-100, 100)))
def test_recenter_idempotent(x):
    once = recenter(ParticleEnsemble(x, np.ones(len(x))))
    twice = recenter(once)
    assert np.allclose(once.points, twice.points, atol=1e-12)


# chamfer

def test_chamfer_identical_is_zero(rng):
    a = rng.standard_normal((20, 2))
    assert chamfer_distance(a, a) == 0.0


def test_chamfer_single_pair():
    assert chamfer_distance([[0.0, 0.0]], [[1.0, 0.0]]) == 2.0


def test_chamfer_rings_match_brute_force():
    ang = 2 * np.pi * np.arange(64) / 64
    a = np.stack([np.cos(ang), np.sin(ang)], 1)
    b = 1.1 * np.stack([np.cos(ang + 0.03), np.sin(ang + 0.03)], 1)
    assert chamfer_distance(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-14)


def test_chamfer_empty_raises():
    with pytest.raises(StructuralError):
        chamfer_distance(np.zeros((0, 2)), np.zeros((3, 2)))


def test_chamfer_dimension_mismatch():
    with pytest.raises(StructuralError):
        chamfer_distance(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 15), st.just(2)), elements=st.floats(-5, 5)),
       arrays(np.float64, st.tuples(st.integers(1, 15), st.just(2)), elements=st.floats(-5, 5)))
def test_chamfer_symmetric(a, b):
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12, abs=1e-300)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(-5, 5)))
def test_chamfer_zero_for_permuted_copy(a):
    assert chamfer_distance(a, a[::-1]) == 0.0


# displacement cost

def test_displacement_cost_zero_field(rng):
    assert displacement_cost(gaussian_ensemble(rng), zero_field(2)) == 0.0


def test_displacement_cost_translation(rng):
    f = linear_field(np.zeros((2, 2)), [0.3, 0.4])
    assert displacement_cost(gaussian_ensemble(rng), f) == pytest.approx(0.25, rel=1e-14)


def test_displacement_cost_hand_sum(rng):
    ens = gaussian_ensemble(rng, m=10)
    A = rng.standard_normal((2, 2))
    b = rng.standard_normal(2)
    v = ens.points @ A.T + b
    want = sum(float(vi @ vi) for vi in v) / 10
    assert displacement_cost(ens, linear_field(A, b)) == pytest.approx(want, rel=1e-13)
