"""Feature-layer neuron pruning (NP) and the feature-importance (FIA) loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .objectives import NetObjective
from .tensor import example_rngs

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class FiaConfig:
    drop_probability: float = 0.1
    ensemble_size: int = 30
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.drop_probability < 1:
            raise ValueError("drop probability must lie in [0, 1)")
        if self.ensemble_size < 1:
            raise ValueError("ensemble size must be >= 1")


def _ablate(mask, width, batch, j):
    m = np.ones((batch, width)) if mask is None else np.array(
        np.broadcast_to(mask, (batch, width)), dtype=np.float64)
    m[:, j] = 0.0
    return m


def importance_exact(net: nn.Network, x, y) -> np.ndarray:
    """|L(net without neuron j) - L(net)| for every feature neuron j.

    Costs one forward pass per neuron; kept as a reference for the
    gradient estimate.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(1 if single else len(x), -1)
    yb = np.asarray(y).reshape(-1)
    base = nn.loss_ce(nn.forward(net, xb)[0], yb)
    out = np.empty((len(xb), net.feature_width))
    for j in range(net.feature_width):
        ablated = net.with_mask(_ablate(net.prune_mask, net.feature_width, len(xb), j))
        out[:, j] = np.abs(nn.loss_ce(nn.forward(ablated, xb)[0], yb) - base)
    return out[0] if single else out


def importance_estimated(net: nn.Network, x, y) -> np.ndarray:
    """|dL/d(feature activation)| from a single forward-backward pass."""
    return np.abs(nn.grad_feature(net, x, y))


def prune_mask(importance, gamma: float) -> np.ndarray:
    """Zero the floor(gamma * n) least important neurons.

    Ties go to the lower index. A 2-D ``importance`` yields one mask per row.
    """
    if not 0 <= gamma < 1:
        raise ValueError("pruning rate must lie in [0, 1)")
    imp = np.asarray(importance, dtype=np.float64)
    n = imp.shape[-1]
    k = int(np.floor(gamma * n))
    mask = np.ones_like(imp)
    if k == 0:
        return mask
    order = np.argsort(imp, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(mask, order, 0.0, axis=-1)
    return mask


def np_attack_step_hook(net: nn.Network, x_adv_t, y, gamma: float) -> nn.Network:
    """Masked view of ``net`` pruned for the current iterate (one mask per example)."""
    base = net.with_mask(None)
    imp = importance_estimated(base, np.asarray(x_adv_t).reshape(len(x_adv_t), -1), y)
    return net.with_mask(prune_mask(imp, gamma))


class PrunedObjective(NetObjective):
    """Network objective whose feature mask is rebuilt before every outer step.

    Importance estimation is a backward pass to the feature layer, not to the
    input, so it is tallied in ``aux_calls`` and not in ``grad_calls``.
    """

    def __init__(self, net, y, gamma, loss_kind="ce", delta=None):
        super().__init__(net.with_mask(None), y, loss_kind, delta)
        self.base_net = net.with_mask(None)
        self.gamma = gamma
        self.aux_calls = 0
        self.masks = None
        self.last_mask_changes = None

    def begin_step(self, x):
        self.aux_calls += 1
        view = np_attack_step_hook(self.base_net, x, self.y, self.gamma)
        if self.masks is None:
            self.last_mask_changes = np.zeros(len(self.y), dtype=np.int64)
        else:
            self.last_mask_changes = np.sum(view.prune_mask != self.masks, axis=-1)
        self.masks = view.prune_mask
        self.net = view

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        flat, y, delta = self._expand(x)
        out = nn.loss_value(self.base_net, flat, y, self.loss_kind, delta)
        return self.direction * out.reshape(x.shape[:-1])


def fia_loss(net: nn.Network, x, y, delta) -> float:
    """sum(delta * feature activations) for a single example."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (net.feature_width,):
        raise ValueError(f"delta shape {delta.shape} != feature width ({net.feature_width},)")
    _, tape = nn.forward(net, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return float(nn.fia_loss_from_tape(tape, delta)[0])


def fia_aggregate_delta(net: nn.Network, x, y, cfg: FiaConfig, indices=None) -> np.ndarray:
    """Aggregate feature weights: mean true-logit feature gradient over
    ``E`` randomly pixel-dropped copies, scaled to unit L2 norm."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(1 if single else len(x), -1)
    yb = np.asarray(y).reshape(-1)
    idx = np.arange(len(xb)) if indices is None else np.asarray(indices)
    E, p = cfg.ensemble_size, cfg.drop_probability
    keep = np.stack([(r.random((E, xb.shape[1])) >= p).astype(np.float64)
                     for r in example_rngs(cfg.seed, "fia", idx)])
    probes = (xb[:, None, :] * keep).reshape(-1, xb.shape[1])
    grads = nn.grad_feature_logit(net, probes, np.repeat(yb, E))
    agg = grads.reshape(len(xb), E, -1).mean(axis=1)
    norm = np.sqrt(np.sum(agg * agg, axis=-1, keepdims=True))
    delta = agg / np.maximum(norm, NORM_FLOOR)
    return delta[0] if single else delta
