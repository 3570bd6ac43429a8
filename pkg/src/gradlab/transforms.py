"""Input-transformation enhancers: diverse inputs (DIM), scale copies (SIM)
and translation-invariant smoothing (TIM).

Each one only changes how the ascent gradient is computed; the attack's
iterate and its projection are untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from . import nn
from .objectives import NetObjective, Objective


@dataclass(frozen=True)
class TransformConfig:
    dim_probability: float = 0.5
    dim_resize_high: int | None = None  # None -> native + ceil(0.18 * native)
    sim_copies: int = 5
    tim_kernel_size: int = 7
    tim_sigma: float | None = None  # None -> kernel_size / 3

    def __post_init__(self):
        if not 0 <= self.dim_probability <= 1:
            raise ValueError("DIM probability must lie in [0, 1]")
        if self.sim_copies < 1:
            raise ValueError("SIM needs at least one copy")
        if self.tim_kernel_size < 1 or self.tim_kernel_size % 2 == 0:
            raise ValueError("TIM kernel size must be odd and >= 1")

    def resize_range(self, native: int) -> tuple[int, int]:
        high = self.dim_resize_high or native + math.ceil(native * 0.18)
        return native, high

    @property
    def sigma(self) -> float:
        return self.tim_sigma if self.tim_sigma is not None else self.tim_kernel_size / 3


def square_shape(d: int) -> tuple[int, int]:
    side = math.isqrt(d)
    if side * side != d:
        raise ValueError(f"cannot infer a square image from {d} pixels")
    return side, side


def _nearest(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def dim_index_map(rng: np.random.Generator, native: int, cfg: TransformConfig):
    """Random resize-and-pad as a gather map.

    Returns ``(padded_src, final_src, high)``: ``padded_src`` is the
    ``high x high`` intermediate (flat indices into the native image, -1 for
    zero padding) and ``final_src`` the same map after the nearest-neighbour
    resize back to ``native x native`` that the fixed-width network needs.
    """
    low, high = cfg.resize_range(native)
    r = int(rng.integers(low, high)) if high > low else low
    top = int(rng.integers(0, high - r + 1))
    left = int(rng.integers(0, high - r + 1))
    src_rc = _nearest(native, r)
    padded = np.full((high, high), -1, dtype=np.int64)
    rows = src_rc[:, None] * native + src_rc[None, :]
    padded[top:top + r, left:left + r] = rows
    back = _nearest(high, native)
    final = padded[back[:, None], back[None, :]]
    return padded, final.reshape(-1), high


def _gather(x: np.ndarray, src: np.ndarray) -> np.ndarray:
    out = np.where(src >= 0, x[..., np.maximum(src, 0)], 0.0)
    return out


def _scatter(grad: np.ndarray, src: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros(grad.shape[:-1] + (d,))
    valid = src >= 0
    np.add.at(out, (..., src[valid]), grad[..., valid])
    return out


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - size // 2
    k1 = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


class DimObjective(Objective):
    def __init__(self, base: Objective, cfg: TransformConfig, shape, rngs):
        h, w = shape
        if h != w:
            raise ValueError("DIM expects square images")
        self.base, self.cfg, self.side, self.rngs = base, cfg, h, rngs
        self.last_mask_changes = None

    @property
    def grad_calls(self):
        return self.base.grad_calls

    def begin_step(self, x):
        self.base.begin_step(x)
        self.last_mask_changes = getattr(self.base, "last_mask_changes", None)

    def _maps(self, batch, reps):
        d = self.side * self.side
        maps = np.empty((batch, reps, d), dtype=np.int64)
        identity = np.arange(d)
        for b, rng in enumerate(self.rngs):
            for j in range(reps):
                if rng.random() < self.cfg.dim_probability:
                    maps[b, j] = dim_index_map(rng, self.side, self.cfg)[1]
                else:
                    maps[b, j] = identity
        return maps

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        B, d = x.shape[0], x.shape[-1]
        xs = x.reshape(B, -1, d)
        maps = self._maps(B, xs.shape[1])
        moved = np.take_along_axis(xs, np.maximum(maps, 0), axis=-1) * (maps >= 0)
        g_moved = self.base.gradient(moved if x.ndim > 2 else moved[:, 0])
        g_moved = g_moved.reshape(xs.shape)
        out = np.zeros_like(xs)
        for b in range(B):
            for j in range(xs.shape[1]):
                out[b, j] = _scatter(g_moved[b, j], maps[b, j], d)
        return out.reshape(x.shape)

    def value(self, x):
        return self.base.value(x)


class SimObjective(Objective):
    def __init__(self, base: Objective, copies: int):
        self.base, self.copies = base, copies
        self.last_mask_changes = None

    @property
    def grad_calls(self):
        return self.base.grad_calls

    def begin_step(self, x):
        self.base.begin_step(x)
        self.last_mask_changes = getattr(self.base, "last_mask_changes", None)

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        total = np.zeros_like(x)
        for i in range(self.copies):
            scale = 0.5 ** i
            total += scale * self.base.gradient(x * scale)
        return total / self.copies

    def value(self, x):
        return self.base.value(x)


class TimObjective(Objective):
    def __init__(self, base: Objective, cfg: TransformConfig, shape):
        h, w = shape
        k = cfg.tim_kernel_size
        if k > h or k > w:
            raise ValueError(f"TIM kernel {k} larger than {h}x{w} image")
        self.base, self.shape = base, (h, w)
        self.kernel = gaussian_kernel(k, cfg.sigma)
        self.last_mask_changes = None

    @property
    def grad_calls(self):
        return self.base.grad_calls

    def begin_step(self, x):
        self.base.begin_step(x)
        self.last_mask_changes = getattr(self.base, "last_mask_changes", None)

    def gradient(self, x):
        g = self.base.gradient(x)
        return smooth_gradient(g, self.kernel, self.shape)

    def value(self, x):
        return self.base.value(x)


def smooth_gradient(g: np.ndarray, kernel: np.ndarray, shape) -> np.ndarray:
    """Convolve each image-shaped gradient with ``kernel`` (replicate borders)."""
    imgs = np.asarray(g, dtype=np.float64).reshape((-1,) + tuple(shape))
    out = convolve(imgs, kernel[None], mode="nearest")
    return out.reshape(np.shape(g))


def wrap(obj: Objective, kind: str, cfg: TransformConfig, shape, rngs) -> Objective:
    if kind == "dim":
        return DimObjective(obj, cfg, shape, rngs)
    if kind == "sim":
        return SimObjective(obj, cfg.sim_copies)
    if kind == "tim":
        return TimObjective(obj, cfg, shape)
    raise ValueError(f"unknown transform {kind!r}")


# -- single-example functional forms ---------------------------------------

def _net_objective(net, x, y):
    return NetObjective(net, np.atleast_1d(y)), np.asarray(x, dtype=np.float64).reshape(1, -1)


def dim_gradient(net: nn.Network, x, y, cfg: TransformConfig, rng) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    obj, xb = _net_objective(net, x, y)
    shape = x.shape if x.ndim == 2 else square_shape(x.size)
    return DimObjective(obj, cfg, shape, [rng]).gradient(xb).reshape(x.shape)


def sim_gradient(net: nn.Network, x, y, cfg: TransformConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    obj, xb = _net_objective(net, x, y)
    return SimObjective(obj, cfg.sim_copies).gradient(xb).reshape(x.shape)


def tim_gradient(net: nn.Network, x, y, cfg: TransformConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    obj, xb = _net_objective(net, x, y)
    shape = x.shape if x.ndim == 2 else square_shape(x.size)
    return TimObjective(obj, cfg, shape).gradient(xb).reshape(x.shape)
