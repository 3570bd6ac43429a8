"""Differentiable objectives the attack engine climbs.

An objective is bound to one batch of examples (labels, FIA weights, masks)
and answers ``gradient(x)`` for points of shape ``(B, d)`` or ``(B, n, d)``,
where the extra axis holds ``n`` probe points per example. Gradients are
returned in the ascent direction, so an objective that should be minimized
(the FIA loss) hands back the negated gradient.

``grad_calls`` counts backward passes per example: a ``(B, n, d)`` query
costs ``n``.
"""

from __future__ import annotations

import numpy as np

from . import nn


class Objective:
    grad_calls: int = 0

    def gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value(self, x: np.ndarray) -> np.ndarray:
        """Per-example loss being maximized (sign already applied)."""
        raise NotImplementedError

    def begin_step(self, x: np.ndarray) -> None:
        """Called with the current iterate before each outer attack step."""

    def _count(self, x: np.ndarray) -> None:
        self.grad_calls += int(np.prod(x.shape[1:-1], dtype=np.int64)) if x.ndim > 2 else 1


class NetObjective(Objective):
    """Cross-entropy (maximized) or FIA loss (minimized) of a network."""

    def __init__(self, net: nn.Network, y, loss_kind: str = "ce", delta=None):
        if loss_kind not in ("ce", "fia"):
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        if loss_kind == "fia" and delta is None:
            raise ValueError("fia loss needs delta")
        self.net = net
        self.y = np.asarray(y, dtype=np.int64).reshape(-1)
        self.loss_kind = loss_kind
        self.delta = None if delta is None else np.atleast_2d(np.asarray(delta, dtype=np.float64))
        self.direction = 1.0 if loss_kind == "ce" else -1.0
        self.grad_calls = 0

    def _expand(self, x):
        reps = int(np.prod(x.shape[1:-1], dtype=np.int64)) if x.ndim > 2 else 1
        y = np.repeat(self.y, reps)
        delta = self.delta
        if delta is not None and delta.shape[0] > 1:
            delta = np.repeat(delta, reps, axis=0)
        return x.reshape(-1, x.shape[-1]), y, delta

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._count(x)
        flat, y, delta = self._expand(x)
        g = nn.grad_input(self.net, flat, y, self.loss_kind, delta)
        if self.direction < 0:
            g = -g
        return g.reshape(x.shape)

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        flat, y, delta = self._expand(x)
        out = nn.loss_value(self.net, flat, y, self.loss_kind, delta)
        return self.direction * out.reshape(x.shape[:-1])


class LinearObjective(Objective):
    """``L(x) = w . x`` for every example; the gradient is ``w`` everywhere."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)
        self.grad_calls = 0

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._count(x)
        return np.broadcast_to(self.w, x.shape).copy()

    def value(self, x):
        return np.asarray(x, dtype=np.float64) @ self.w


class QuadraticObjective(Objective):
    """``L(x) = 0.5 x^T A x + b^T x`` with symmetric ``A``."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.grad_calls = 0

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._count(x)
        return x @ self.A.T + self.b

    def value(self, x):
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.A, x) + x @ self.b
