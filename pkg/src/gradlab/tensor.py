"""Elementwise tensor helpers and seeded randomness.

Tensors are plain float64 numpy arrays. Attack code works on batches of
flattened examples, shape ``(B, d)``; helpers that reduce take an ``axis``
so they can act per example.
"""

from __future__ import annotations

import hashlib

import numpy as np

L1_FLOOR = 1e-12
PIXEL_MIN = 0.0
PIXEL_MAX = 1.0


def as_tensor(t) -> np.ndarray:
    return np.asarray(t, dtype=np.float64)


def sign(t: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sign(0) == 0``."""
    return np.sign(as_tensor(t))


def l1_normalize(t: np.ndarray, axis=None) -> np.ndarray:
    """Divide ``t`` by its L1 norm, floored at 1e-12.

    With ``axis`` given the norm is taken along those axes, so ``axis=-1``
    normalizes each row of a ``(B, d)`` batch independently.
    """
    t = as_tensor(t)
    norm = np.sum(np.abs(t), axis=axis, keepdims=axis is not None)
    return t / np.maximum(norm, L1_FLOOR)


def clip_ball(center: np.ndarray, eps: float, v: np.ndarray) -> np.ndarray:
    """Project ``v`` onto the L-inf ball of radius ``eps`` around ``center``,
    then onto the pixel box [0, 1]."""
    center = as_tensor(center)
    v = as_tensor(v)
    if center.shape != v.shape:
        raise ValueError(f"shape mismatch: center {center.shape} vs v {v.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    out = np.clip(v, center - eps, center + eps)
    return np.clip(out, PIXEL_MIN, PIXEL_MAX)


def uniform_ball_sample(rng: np.random.Generator, shape, radius: float) -> np.ndarray:
    """Independent U[-radius, radius] draws, one per component."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return np.zeros(shape)
    return rng.uniform(-radius, radius, size=shape)


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("integer seed keys must be non-negative")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for ``seed`` and an optional role path.

    Keys (ints or strings) are folded into a ``SeedSequence`` so that
    ``make_rng(s, "attack", 3)`` is a stream independent of every other role
    and of evaluation order. Strings are hashed with SHA-256, never with
    Python's salted ``hash``.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def example_rngs(seed: int, role: str, indices) -> list[np.random.Generator]:
    """One generator per example index, keyed by (seed, role, index)."""
    return [make_rng(seed, role, int(i)) for i in indices]
