import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradlab.tensor import clip_ball, example_rngs, l1_normalize, make_rng, sign, uniform_ball_sample

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_sign_values():
    assert sign(np.array([2.5, -0.1, 0.0])).tolist() == [1.0, -1.0, 0.0]
    assert sign(np.array([-1e-12, 1e-12])).tolist() == [-1.0, 1.0]


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_sign_idempotent(t):
    np.testing.assert_array_equal(sign(sign(t)), sign(t))


def test_l1_normalize_examples():
    np.testing.assert_array_equal(l1_normalize(np.array([3.0, -1.0])), [0.75, -0.25])
    np.testing.assert_array_equal(l1_normalize(np.zeros(5)), np.zeros(5))


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
def test_l1_normalize_unit_norm(t):
    if np.abs(t).sum() < 1e-12:
        return
    assert np.abs(l1_normalize(t)).sum() == pytest.approx(1.0, rel=1e-12)


def test_l1_normalize_rows():
    t = np.array([[1.0, 1.0], [0.0, -4.0]])
    np.testing.assert_array_equal(l1_normalize(t, axis=-1), [[0.5, 0.5], [0.0, -1.0]])


def test_clip_ball_examples():
    assert clip_ball(np.array([0.5]), 0.1, np.array([0.72]))[0] == pytest.approx(0.6)
    assert clip_ball(np.array([0.05]), 0.1, np.array([-0.2]))[0] == 0.0
    v = np.array([0.3, 0.55])
    np.testing.assert_array_equal(clip_ball(np.array([0.3, 0.5]), 0.1, v), v)


def test_clip_ball_shape_mismatch():
    with pytest.raises(ValueError):
        clip_ball(np.zeros(3), 0.1, np.zeros(4))


@settings(max_examples=200)
@given(arrays(np.float64, 6, elements=st.floats(0, 1)),
       arrays(np.float64, 6, elements=st.floats(-5, 5)),
       st.floats(0, 2))
def test_clip_ball_contains(center, v, eps):
    out = clip_ball(center, eps, v)
    assert np.all(np.abs(out - center) <= eps + 1e-15)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_uniform_ball_zero_radius():
    np.testing.assert_array_equal(uniform_ball_sample(make_rng(0), (3, 4), 0.0), np.zeros((3, 4)))


def test_uniform_ball_support():
    draws = uniform_ball_sample(make_rng(9), (100_000,), 0.25)
    assert np.abs(draws).max() <= 0.25


def test_uniform_ball_regression_seed_42():
    got = uniform_ball_sample(make_rng(42), (4,), 1.0)
    expected = [0.5479120971119267, -0.12224312049589536, 0.7171958398227649, 0.3947360581187278]
    assert got.tolist() == expected


def test_rng_streams_are_keyed():
    a = make_rng(3, "variance", 0).random(5)
    b = make_rng(3, "variance", 0).random(5)
    c = make_rng(3, "variance", 1).random(5)
    d = make_rng(3, "dim", 0).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
    first = example_rngs(3, "variance", [0, 1])
    np.testing.assert_array_equal(first[1].random(5), c)
