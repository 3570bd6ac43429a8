import numpy as np
import pytest
from scipy.stats import spearmanr

from gradlab import attacks, nn
from gradlab.nn import Network, forward, grad_feature, grad_feature_logit, loss_ce
from gradlab.surgery import (FiaConfig, PrunedObjective, fia_aggregate_delta, fia_loss,
                             importance_estimated, importance_exact, np_attack_step_hook,
                             prune_mask)
from gradlab.tensor import make_rng


def _linear_head_net(u):
    """Two-class net whose features are constant 1 and whose class score
    difference is sum(u_j f_j); ablating feature j moves that score by u_j."""
    n = len(u)
    w1 = np.zeros((3, n))
    b1 = np.ones(n)
    w2 = np.stack([np.asarray(u, dtype=float), np.zeros(n)], axis=1)
    return Network.from_arrays([w1, w2], [b1, np.zeros(2)])


def test_importance_exact_zero_outgoing(mnist_net, rng):
    w = [a.copy() for a in mnist_net.weights]
    w[-1][3] = 0.0
    net = Network(tuple(w), mnist_net.biases)
    imp = importance_exact(net, rng.uniform(0, 1, 784), 2)
    assert imp[3] == 0.0
    assert np.all(imp >= 0)


def test_importance_exact_fixture_loop(fixture_net):
    net, spec = fixture_net
    x, y = np.array(spec["x"]), spec["y"]
    w1, w2 = net.weights
    b1, b2 = net.biases
    h = np.maximum(x @ w1 + b1, 0)
    base = -np.log(np.exp(h @ w2 + b2)[y] / np.exp(h @ w2 + b2).sum())
    expected = []
    for j in range(2):
        hj = h.copy()
        hj[j] = 0.0
        z = hj @ w2 + b2
        expected.append(abs(-np.log(np.exp(z)[y] / np.exp(z).sum()) - base))
    np.testing.assert_allclose(importance_exact(net, x, y), expected, rtol=1e-13, atol=1e-15)
    assert importance_exact(net, x, y)[1] == 0.0  # dead ReLU


def test_importance_estimated_is_abs_grad(mnist_net, rng):
    x = rng.uniform(0, 1, (3, 784))
    y = np.array([0, 4, 9])
    np.testing.assert_array_equal(importance_estimated(mnist_net, x, y),
                                  np.abs(grad_feature(mnist_net, x, y)))
    mask = np.ones(32)
    mask[5] = 0
    assert np.all(importance_estimated(mnist_net.with_mask(mask), x, y)[:, 5] == 0)


def test_importance_estimated_dead_neuron(fixture_net):
    net, spec = fixture_net
    assert importance_estimated(net, np.array(spec["x"]), spec["y"])[1] == 0.0


def test_linear_head_rank_agreement():
    u = np.array([0.3, 2.0, 0.05, 1.1, 0.7, 1.6])
    net = _linear_head_net(u)
    x = np.array([0.2, 0.5, 0.9])
    exact = importance_exact(net, x, 0)
    est = importance_estimated(net, x, 0)
    assert spearmanr(exact, est).statistic == 1.0
    np.testing.assert_array_equal(np.argsort(exact), np.argsort(est))


def test_importance_estimated_single_pass(mnist_net, rng, monkeypatch):
    calls = []
    real = nn.backward
    monkeypatch.setattr(nn, "backward", lambda *a, **k: calls.append(1) or real(*a, **k))
    importance_estimated(mnist_net, rng.uniform(0, 1, 784), 1)
    assert len(calls) == 1


def test_prune_mask_rules():
    np.testing.assert_array_equal(prune_mask(np.arange(5.0), 0.0), np.ones(5))
    m = prune_mask(np.random.default_rng(0).random(10), 0.9)
    assert int((m == 0).sum()) == 9
    tied = np.array([1.0, 0.5, 0.5, 0.5, 2.0])
    np.testing.assert_array_equal(prune_mask(tied, 0.4), [1, 0, 0, 1, 1])
    imp = np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 4.0]])
    np.testing.assert_array_equal(prune_mask(imp, 0.5), [[1, 0, 1], [0, 1, 1]])
    with pytest.raises(ValueError):
        prune_mask(np.ones(3), 1.0)


def test_prune_mask_matches_argmin(rng):
    for _ in range(20):
        imp = rng.integers(0, 4, size=12).astype(float)
        gamma = float(rng.uniform(0, 0.99))
        k = int(np.floor(gamma * 12))
        ranked = sorted(range(12), key=lambda j: (imp[j], j))[:k]
        expected = np.ones(12)
        expected[ranked] = 0
        np.testing.assert_array_equal(prune_mask(imp, gamma), expected)


def test_mask_idempotence(mnist_net, rng):
    x = rng.uniform(0, 1, (2, 784))
    m = (rng.random(32) > 0.5).astype(float)
    again = m.copy()
    again[np.flatnonzero(m == 0)[0]] = 0
    np.testing.assert_array_equal(forward(mnist_net.with_mask(m), x)[0],
                                  forward(mnist_net.with_mask(m * again), x)[0])


def test_step_hook_masks_each_example(mnist_net, rng):
    x = rng.uniform(0, 1, (3, 784))
    view = np_attack_step_hook(mnist_net, x, np.array([1, 2, 3]), 0.5)
    assert view.prune_mask.shape == (3, 32)
    assert np.all((view.prune_mask == 0).sum(axis=1) == 16)


def test_zero_gamma_attack_matches_plain(mnist_net, rng):
    x = rng.uniform(0, 1, (4, 784))
    y = np.array([0, 1, 2, 3])
    cfg = attacks.AttackConfig(method="dta", eps=0.05, steps=4, inner_steps=3)
    plain, _ = attacks.run(mnist_net, x, y, cfg)
    obj = PrunedObjective(mnist_net, y, 0.0)
    pruned, trace = attacks.run(obj, x, y, cfg)
    np.testing.assert_array_equal(plain, pruned)
    assert all((c == 0).all() for c in trace.mask_changes)


def test_mask_changes_recorded(mnist_net, rng):
    x = rng.uniform(0, 1, (4, 784))
    cfg = attacks.AttackConfig(method="mi_fgsm", eps=0.1, steps=5, prune_rate=0.9)
    _, trace = attacks.run(mnist_net, x, np.array([0, 1, 2, 3]), cfg)
    changes = np.array(trace.mask_changes)
    assert changes.shape == (5, 4)
    assert changes[0].sum() == 0 and changes[1:].sum() > 0


def test_fia_loss_examples(mnist_net, rng):
    x = rng.uniform(0, 1, 784)
    assert fia_loss(mnist_net, x, 0, np.zeros(32)) == 0.0
    assert np.all(nn.grad_input(mnist_net, x, 0, "fia", np.zeros(32)) == 0)
    feats = forward(mnist_net, x[None])[1].features[0]
    assert fia_loss(mnist_net, x, 0, np.ones(32)) == pytest.approx(feats.sum(), rel=1e-14)
    with pytest.raises(ValueError):
        fia_loss(mnist_net, x, 0, np.ones(31))


def test_fia_gradient_finite_difference(small_net, rng):
    h = 1e-5
    for _ in range(20):
        delta = rng.normal(size=small_net.feature_width)
        x = rng.uniform(0.2, 0.8, 2)
        g = nn.grad_input(small_net, x, 0, "fia", delta)
        fd = np.array([(fia_loss(small_net, x + h * e, 0, delta) -
                        fia_loss(small_net, x - h * e, 0, delta)) / (2 * h) for e in np.eye(2)])
        assert np.max(np.abs(g - fd)) <= 1e-4 * max(np.max(np.abs(fd)), 1e-8)


def test_fia_delta_clean_case(mnist_net, rng):
    x = rng.uniform(0, 1, 784)
    delta = fia_aggregate_delta(mnist_net, x, 6, FiaConfig(drop_probability=0.0, ensemble_size=1))
    g = grad_feature_logit(mnist_net, x, 6)
    np.testing.assert_allclose(delta, g / np.linalg.norm(g), rtol=1e-14)
    assert np.linalg.norm(delta) == pytest.approx(1.0, abs=1e-14)


def test_fia_delta_four_trial_loop(mnist_net, rng):
    x = rng.uniform(0, 1, (2, 784))
    y = np.array([3, 8])
    cfg = FiaConfig(drop_probability=0.1, ensemble_size=4, seed=21)
    got = fia_aggregate_delta(mnist_net, x, y, cfg)
    for i in range(2):
        r = make_rng(21, "fia", i)
        keep = r.random((4, 784)) >= 0.1
        total = np.zeros(32)
        for e in range(4):
            total += grad_feature_logit(mnist_net, x[i] * keep[e], y[i])
        total /= 4
        np.testing.assert_allclose(got[i], total / np.linalg.norm(total), rtol=1e-12, atol=1e-15)


def test_fia_config_validation():
    with pytest.raises(ValueError):
        FiaConfig(drop_probability=1.0)
    with pytest.raises(ValueError):
        FiaConfig(ensemble_size=0)


def test_fia_attack_lowers_feature_loss(mnist_net, rng):
    x = rng.uniform(0, 1, (3, 784))
    y = np.array([1, 2, 3])
    cfg = attacks.AttackConfig(method="i_fgsm", eps=0.05, steps=5, loss_kind="fia")
    x_adv, trace = attacks.run(mnist_net, x, y, cfg, fia_cfg=FiaConfig(ensemble_size=4))
    delta = fia_aggregate_delta(mnist_net, x, y, FiaConfig(ensemble_size=4))
    before = nn.loss_value(mnist_net, x, y, "fia", delta)
    after = nn.loss_value(mnist_net, x_adv, y, "fia", delta)
    assert np.all(after < before)
