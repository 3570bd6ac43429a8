import numpy as np
import pytest
from scipy.signal import correlate2d

from gradlab.nn import grad_input, he_init
from gradlab.objectives import LinearObjective
from gradlab.tensor import make_rng
from gradlab.transforms import (DimObjective, SimObjective, TimObjective, TransformConfig,
                                dim_gradient, dim_index_map, gaussian_kernel, sim_gradient,
                                smooth_gradient, tim_gradient)


@pytest.fixture
def net8():
    return he_init([64, 16, 5], make_rng(5, "net"))


@pytest.fixture
def x8():
    return make_rng(5, "x").uniform(0, 1, 64)


def test_config_validation():
    with pytest.raises(ValueError):
        TransformConfig(dim_probability=1.5)
    with pytest.raises(ValueError):
        TransformConfig(sim_copies=0)
    with pytest.raises(ValueError):
        TransformConfig(tim_kernel_size=4)
    assert TransformConfig().resize_range(28) == (28, 34)
    assert TransformConfig(tim_kernel_size=9).sigma == 3.0


def test_dim_probability_zero_is_plain(net8, x8):
    g = dim_gradient(net8, x8, 2, TransformConfig(dim_probability=0.0), make_rng(0))
    np.testing.assert_array_equal(g, grad_input(net8, x8[None], np.array([2]))[0])


def test_dim_intermediate_size(rng):
    cfg = TransformConfig()
    for _ in range(20):
        padded, final, high = dim_index_map(rng, 8, cfg)
        assert padded.shape == (high, high) == (10, 10)
        assert final.shape == (64,)


def test_dim_gradient_is_adjoint(net8, x8):
    # <grad of L(Px)>, the chain rule through the gather map
    cfg = TransformConfig(dim_probability=1.0)
    _, src, _ = dim_index_map(make_rng(3), 8, cfg)
    moved = np.where(src >= 0, x8[np.maximum(src, 0)], 0.0)
    g_moved = grad_input(net8, moved[None], np.array([1]))[0]
    expected = np.zeros(64)
    for j, s in enumerate(src):
        if s >= 0:
            expected[s] += g_moved[j]
    got = dim_gradient(net8, x8, 1, TransformConfig(dim_probability=1.0), _replay_rng(3))
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)


def _replay_rng(seed):
    # dim_gradient draws the branch coin first, then the map
    rng = make_rng(seed)
    state = rng.bit_generator.state
    rng.random()
    return _Prefixed(state)


class _Prefixed:
    """Generator whose first ``random()`` is skipped so the map matches ``make_rng(seed)``."""

    def __init__(self, state):
        self.g = np.random.Generator(np.random.PCG64())
        self.g.bit_generator.state = state
        self.first = True

    def random(self):
        if self.first:
            self.first = False
            return 0.0
        return self.g.random()

    def integers(self, *a, **k):
        return self.g.integers(*a, **k)


def test_dim_regression_fixture(net8, x8):
    g = dim_gradient(net8, x8, 2, TransformConfig(dim_probability=1.0), make_rng(11))
    assert np.count_nonzero(g) == 42
    assert g[[1, 6, 12]].tolist() == [-0.02865834097213879, -0.1876157160159333,
                                      0.07031692969664763]
    assert float(g.sum()) == pytest.approx(-0.7445053202645633, rel=1e-12)


def test_sim_single_copy_is_plain(net8, x8):
    np.testing.assert_array_equal(sim_gradient(net8, x8, 0, TransformConfig(sim_copies=1)),
                                  grad_input(net8, x8[None], np.array([0]))[0])


def test_sim_linear_closed_form():
    w = np.array([1.0, -2.0, 0.5])
    obj = SimObjective(LinearObjective(w), 5)
    got = obj.gradient(np.full((1, 3), 0.3))[0]
    np.testing.assert_allclose(got, w * sum(2.0 ** -i for i in range(5)) / 5, rtol=1e-15)


def test_sim_five_term_loop(net8, x8):
    expected = np.zeros(64)
    for i in range(5):
        expected += grad_input(net8, (x8 / 2 ** i)[None], np.array([4]))[0] / 2 ** i
    expected /= 5
    np.testing.assert_allclose(sim_gradient(net8, x8, 4, TransformConfig()), expected,
                               rtol=1e-13, atol=1e-16)


def test_tim_kernel_one_is_identity(net8, x8):
    np.testing.assert_array_equal(tim_gradient(net8, x8, 3, TransformConfig(tim_kernel_size=1)),
                                  grad_input(net8, x8[None], np.array([3]))[0])


def test_tim_constant_field_unchanged():
    g = np.full((2, 100), 0.7)
    out = smooth_gradient(g, gaussian_kernel(7, 7 / 3), (10, 10))
    np.testing.assert_allclose(out, g, rtol=1e-14)


def test_tim_spike_gives_kernel():
    k = gaussian_kernel(7, 7 / 3)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    spike = np.zeros((15, 15))
    spike[7, 7] = 1.0
    out = smooth_gradient(spike.reshape(1, -1), k, (15, 15)).reshape(15, 15)
    direct = correlate2d(spike, k, mode="same")
    np.testing.assert_allclose(out, direct, atol=1e-16)
    np.testing.assert_allclose(out[4:11, 4:11], k, atol=1e-16)


def test_tim_kernel_too_large():
    with pytest.raises(ValueError):
        TimObjective(LinearObjective(np.ones(16)), TransformConfig(tim_kernel_size=7), (4, 4))


def test_transforms_keep_counts():
    base = LinearObjective(np.ones(16))
    obj = SimObjective(base, 3)
    obj.gradient(np.zeros((2, 16)))
    assert obj.grad_calls == 3
    dim = DimObjective(LinearObjective(np.ones(16)), TransformConfig(), (4, 4),
                       [make_rng(0), make_rng(1)])
    dim.gradient(np.zeros((2, 16)))
    assert dim.grad_calls == 1
