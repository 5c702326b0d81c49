import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from smcsghmc.core import (
    ParamLayout,
    ParticleSet,
    effective_sample_size,
    flatten_params,
    normalize_log_weights,
    rng_stream,
    unflatten_params,
)
from smcsghmc.errors import ContractViolation, DegenerateWeights, ShapeError
from smcsghmc.model import MlpModel


def test_normalize_two_point_ratio():
    w, _ = normalize_log_weights([math.log(1), math.log(3)])
    np.testing.assert_allclose(w, [0.25, 0.75], rtol=1e-15)


@pytest.mark.parametrize("c", [-1e6, -3.5, 0.0, 700.0, 1e6])
def test_normalize_constant_is_uniform(c):
    w, log_z = normalize_log_weights([c] * 4)
    np.testing.assert_array_equal(w, 0.25)
    assert log_z == pytest.approx(c + math.log(4), rel=1e-15)


def test_normalize_extreme_offsets_against_mpmath():
    mpmath.mp.dps = 50
    x = [-1000, -1001]
    z = mpmath.fsum(mpmath.e ** xi for xi in x)
    expected = [float(mpmath.e ** xi / z) for xi in x]
    w, log_z = normalize_log_weights(x)
    np.testing.assert_allclose(w, expected, rtol=1e-14)
    np.testing.assert_allclose(w, [math.e / (1 + math.e), 1 / (1 + math.e)], rtol=1e-14)
    assert log_z == pytest.approx(float(mpmath.log(z)), rel=1e-15)


def test_normalize_handles_minus_inf_entries():
    w, _ = normalize_log_weights([-np.inf, 0.0, -np.inf])
    np.testing.assert_array_equal(w, [0.0, 1.0, 0.0])


def test_normalize_all_minus_inf_raises():
    with pytest.raises(DegenerateWeights):
        normalize_log_weights([-np.inf, -np.inf])


def test_normalize_rejects_nan():
    with pytest.raises(ContractViolation):
        normalize_log_weights([0.0, np.nan])


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6)),
    st.floats(-1e5, 1e5),
)
def test_normalize_shift_invariance(log_w, c):
    w1, _ = normalize_log_weights(log_w)
    w2, _ = normalize_log_weights(log_w + c)
    assert abs(w1.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(w1, w2, atol=1e-9)


def test_ess_examples():
    assert effective_sample_size(np.full(10, 0.1)) == 10.0
    assert effective_sample_size([1.0, 0.0, 0.0, 0.0]) == 1.0
    assert effective_sample_size([0.5, 0.5, 0.0, 0.0]) == 2.0


def test_ess_rejects_unnormalized():
    with pytest.raises(ContractViolation):
        effective_sample_size([0.5, 0.6])


@pytest.mark.parametrize("J", [1, 3, 7, 10, 1000, 4099])
def test_ess_uniform_is_exact(J):
    w, _ = normalize_log_weights(np.full(J, -math.log(J)))
    assert effective_sample_size(w) == J


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50)), st.randoms())
def test_ess_permutation_invariant_and_bounded(log_w, random):
    w, _ = normalize_log_weights(log_w)
    perm = list(range(len(w)))
    random.shuffle(perm)
    ess = effective_sample_size(w)
    assert ess == pytest.approx(effective_sample_size(w[perm]), rel=1e-12)
    assert 1.0 - 1e-12 <= ess <= len(w) * (1 + 1e-12)
    assert ess == pytest.approx(1.0 / np.sum(w**2), rel=1e-12)


def test_flatten_small_layout_roundtrip():
    layout = ParamLayout([(2, 2), (2,)])
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([5.0, 6.0])
    v = flatten_params(layout, [W, b])
    assert v.shape == (6,)
    W2, b2 = unflatten_params(layout, v)
    np.testing.assert_array_equal(W2, W)
    np.testing.assert_array_equal(b2, b)


def test_empty_layout_is_zero_vector():
    layout = ParamLayout([])
    assert layout.dim == 0
    assert flatten_params(layout, []).shape == (0,)
    assert unflatten_params(layout, np.zeros(0)) == []


def test_mnist_mlp_dimension():
    assert MlpModel([784, 100, 10]).dim == 784 * 100 + 100 + 100 * 10 + 10 == 79510


def test_layout_dimension_mismatch():
    layout = ParamLayout([(2, 2), (2,)])
    with pytest.raises(ShapeError):
        layout.unflatten(np.zeros(5))
    with pytest.raises(ShapeError):
        layout.flatten([np.zeros((2, 3)), np.zeros(2)])


def test_flatten_unflatten_random_layouts():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shapes = [tuple(rng.integers(1, 5, size=rng.integers(0, 4))) for _ in range(rng.integers(0, 5))]
        layout = ParamLayout(shapes)
        v = rng.standard_normal(layout.dim)
        back = layout.flatten(layout.unflatten(v))
        assert back.tobytes() == v.tobytes()
        arrays_ = [rng.standard_normal(s) for s in layout.shapes]
        for a, b in zip(arrays_, layout.unflatten(layout.flatten(arrays_))):
            assert a.tobytes() == b.tobytes()


def test_rng_stream_reproducible_and_distinct():
    a = rng_stream(7, 3).standard_normal(5)
    b = rng_stream(7, 3).standard_normal(5)
    c = rng_stream(7, 4).standard_normal(5)
    d = rng_stream(8, 3).standard_normal(5)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_particle_set_shapes():
    ps = ParticleSet(np.zeros((3, 2)), [0.0, 0.0, 0.0])
    assert (ps.count, ps.dim) == (3, 2)
    assert ps.ess() == 3.0
    with pytest.raises(ShapeError):
        ParticleSet(np.zeros((3, 2)), [0.0, 0.0])
