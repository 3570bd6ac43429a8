"""Sign-gradient iterative attacks under an L-inf budget.

All attacks share one calling convention::

    x_adv, trace = dta(net, x, y, cfg)

``net`` is either a :class:`~gradlab.nn.Network` (the objective is then
assembled from ``cfg``: loss kind, pruning, input transform) or any
:class:`~gradlab.objectives.Objective`. ``x`` is a batch ``(B, ...)`` of clean
inputs; every example follows its own recurrence, and random draws come from
one generator per example keyed by ``(cfg.seed, role, index)``.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .objectives import NetObjective, Objective
from .tensor import clip_ball, example_rngs, l1_normalize, sign, uniform_ball_sample

METHODS = ("fgsm", "i_fgsm", "mi_fgsm", "ni_fgsm", "vmi_fgsm", "vni_fgsm", "dta", "vdta")
TRACE_LEVELS = ("summary", "full", "inner")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "i_fgsm"
    eps: float = 16 / 255
    steps: int = 10
    step_len: float | None = None  # None -> eps / steps
    decay1: float = 1.0
    decay2: float = 0.0
    inner_steps: int = 10
    beta: float = 1.5
    variance_samples: int = 20
    norm: str = "inf"
    loss_kind: str = "ce"
    transform: str = "none"
    prune_rate: float = 0.0
    seed: int = 0
    grad_norm: str = "mean"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.norm != "inf":
            raise ValueError("only the L-inf budget is supported")
        # eps = 0 is accepted and returns the clean input
        if not (self.eps >= 0 and np.isfinite(self.eps)):
            raise ValueError("eps must be finite and non-negative")
        if self.steps < 1 or self.inner_steps < 1 or self.variance_samples < 1:
            raise ValueError("steps, inner_steps and variance_samples must be >= 1")
        if self.step_len is not None and not self.step_len > 0:
            raise ValueError("step length must be positive")
        if self.beta < 0 or self.decay1 < 0 or self.decay2 < 0:
            raise ValueError("beta and decay factors must be non-negative")
        if not 0 <= self.prune_rate < 1:
            raise ValueError("prune rate must lie in [0, 1)")
        if self.loss_kind not in ("ce", "fia"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.grad_norm not in ("mean", "sum"):
            raise ValueError(f"unknown gradient normalization {self.grad_norm!r}")
        if self.transform not in ("none", "dim", "sim", "tim"):
            raise ValueError(f"unknown transform {self.transform!r}")

    @property
    def alpha(self) -> float:
        return self.eps / self.steps if self.step_len is None else self.step_len

    def as_dict(self) -> dict:
        return asdict(self)


# Full-scale defaults; desk presets shrink N.
DTA_DEFAULTS = dict(inner_steps=10, decay2=0.0)
VDTA_DEFAULTS = dict(inner_steps=10, decay2=0.8)


@dataclass
class AttackTrace:
    """Per-outer-iteration record.

    ``linf``, ``loss`` and ``grad_calls`` are always filled. At level
    ``"full"`` the tensors ``x_from`` (iterate where step t's direction was
    computed), ``x`` (iterate after the step), ``g`` and ``v`` are kept;
    level ``"inner"`` adds ``inner_g[t]`` with shape ``(K, B, d)`` for the
    direction-tuning attacks.
    """
    method: str
    level: str = "summary"
    linf: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_calls: list = field(default_factory=list)
    x_from: list = field(default_factory=list)
    x: list = field(default_factory=list)
    g: list = field(default_factory=list)
    v: list = field(default_factory=list)
    inner_g: list = field(default_factory=list)
    mask_changes: list = field(default_factory=list)

    def __len__(self):
        return len(self.grad_calls)

    @property
    def total_grad_calls(self) -> int:
        return self.grad_calls[-1] if self.grad_calls else 0

    def record(self, obj: Objective, x0, x_from, x_new, g, v, inner=None):
        self.linf.append(np.abs(x_new - x0).max(axis=-1))
        self.loss.append(np.asarray(obj.value(x_new), dtype=np.float64))
        self.grad_calls.append(obj.grad_calls)
        changes = getattr(obj, "last_mask_changes", None)
        self.mask_changes.append(None if changes is None else np.asarray(changes))
        if self.level in ("full", "inner"):
            self.x_from.append(x_from.copy())
            self.x.append(x_new.copy())
            self.g.append(np.array(g, dtype=np.float64, copy=True))
            self.v.append(np.array(v, dtype=np.float64, copy=True))
        if self.level == "inner" and inner is not None:
            self.inner_g.append(np.stack(inner))

    def write_csv(self, path) -> None:
        """One row per outer iteration: t, linf, loss, grad_calls.

        ``linf`` is the max over the batch and ``loss`` the batch mean.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "linf", "loss", "grad_calls"])
            for t in range(len(self)):
                w.writerow([t + 1, repr(float(np.max(self.linf[t]))),
                            repr(float(np.mean(self.loss[t]))), self.grad_calls[t]])


def make_objective(net, x, y, cfg: AttackConfig, indices=None, transform_cfg=None,
                   fia_cfg=None) -> Objective:
    """Assemble the loss, pruning and input-transform stack for ``cfg``."""
    if isinstance(net, Objective):
        return net
    from . import surgery, transforms

    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(len(x), -1)
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    delta = None
    if cfg.loss_kind == "fia":
        fia_cfg = fia_cfg or surgery.FiaConfig(seed=cfg.seed)
        delta = surgery.fia_aggregate_delta(net, flat, y, fia_cfg, indices=indices)
    if cfg.prune_rate > 0:
        obj = surgery.PrunedObjective(net, y, cfg.prune_rate, cfg.loss_kind, delta)
    else:
        obj = NetObjective(net, y, cfg.loss_kind, delta)
    if cfg.transform != "none":
        tcfg = transform_cfg or transforms.TransformConfig()
        shape = x.shape[1:] if x.ndim == 3 else transforms.square_shape(flat.shape[1])
        obj = transforms.wrap(obj, cfg.transform, tcfg, shape,
                              example_rngs(cfg.seed, "dim", indices))
    return obj


def _prepare(net, x, y, cfg, indices, transform_cfg, fia_cfg):
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    x0 = x.reshape(len(x), -1)
    obj = make_objective(net, x, y, cfg, indices, transform_cfg, fia_cfg)
    idx = np.arange(len(x0)) if indices is None else np.asarray(indices)
    return obj, x0, shape, idx


def _normalize(t, cfg):
    """Per-example L1 normalization; ``grad_norm="mean"`` rescales by d."""
    out = l1_normalize(t, axis=-1)
    if cfg.grad_norm == "mean":
        out = out * t.shape[-1]
    return out


def _variance(obj, center, grad_center, cfg, rngs):
    """Mean neighbourhood gradient minus the gradient at ``center``.

    Neighbours are ``center + r`` with ``r ~ U[-beta*eps, beta*eps]^d``.
    Differences are averaged (rather than averaging then subtracting) so
    that a zero radius gives exactly zero.
    """
    n, d = cfg.variance_samples, center.shape[-1]
    radius = cfg.beta * cfg.eps
    noise = np.stack([uniform_ball_sample(r, (n, d), radius) for r in rngs])
    grads = obj.gradient(center[:, None, :] + noise)
    return np.mean(grads - grad_center[:, None, :], axis=1)


def fgsm(net, x, y, cfg: AttackConfig, indices=None, trace_level="summary",
         transform_cfg=None, fia_cfg=None):
    """Single step of size eps along the gradient sign."""
    obj, x0, shape, _ = _prepare(net, x, y, cfg, indices, transform_cfg, fia_cfg)
    trace = AttackTrace("fgsm", trace_level)
    obj.begin_step(x0)
    grad = obj.gradient(x0)
    x_adv = clip_ball(x0, cfg.eps, x0 + cfg.eps * sign(grad))
    trace.record(obj, x0, x0, x_adv, grad, np.zeros_like(x0))
    return x_adv.reshape(shape), trace


def i_fgsm(net, x, y, cfg: AttackConfig, indices=None, trace_level="summary",
           transform_cfg=None, fia_cfg=None):
    obj, x0, shape, _ = _prepare(net, x, y, cfg, indices, transform_cfg, fia_cfg)
    trace = AttackTrace("i_fgsm", trace_level)
    alpha = cfg.alpha
    x_adv = x0.copy()
    zeros = np.zeros_like(x0)
    for _ in range(cfg.steps):
        obj.begin_step(x_adv)
        grad = obj.gradient(x_adv)
        x_new = clip_ball(x0, cfg.eps, x_adv + alpha * sign(grad))
        trace.record(obj, x0, x_adv, x_new, grad, zeros)
        x_adv = x_new
    return x_adv.reshape(shape), trace


def _momentum(net, x, y, cfg, nesterov, variance, name, indices, trace_level,
              transform_cfg, fia_cfg):
    obj, x0, shape, idx = _prepare(net, x, y, cfg, indices, transform_cfg, fia_cfg)
    rngs = example_rngs(cfg.seed, "variance", idx) if variance else None
    trace = AttackTrace(name, trace_level)
    alpha, mu = cfg.alpha, cfg.decay1
    x_adv = x0.copy()
    g = np.zeros_like(x0)
    v = np.zeros_like(x0)
    for _ in range(cfg.steps):
        obj.begin_step(x_adv)
        probe = x_adv + alpha * mu * g if nesterov else x_adv
        grad = obj.gradient(probe)
        if variance:
            g = mu * g + _normalize(grad + v, cfg)
            v = _variance(obj, probe, grad, cfg, rngs)
        else:
            g = mu * g + _normalize(grad, cfg)
        x_new = clip_ball(x0, cfg.eps, x_adv + alpha * sign(g))
        trace.record(obj, x0, x_adv, x_new, g, v)
        x_adv = x_new
    return x_adv.reshape(shape), trace


def mi_fgsm(net, x, y, cfg, indices=None, trace_level="summary", transform_cfg=None,
            fia_cfg=None):
    return _momentum(net, x, y, cfg, False, False, "mi_fgsm", indices, trace_level,
                     transform_cfg, fia_cfg)


def ni_fgsm(net, x, y, cfg, indices=None, trace_level="summary", transform_cfg=None,
            fia_cfg=None):
    return _momentum(net, x, y, cfg, True, False, "ni_fgsm", indices, trace_level,
                     transform_cfg, fia_cfg)


def vmi_fgsm(net, x, y, cfg, nesterov=False, indices=None, trace_level="summary",
             transform_cfg=None, fia_cfg=None):
    """Variance-tuned MI-FGSM; ``nesterov=True`` gives VNI-FGSM."""
    name = "vni_fgsm" if nesterov else "vmi_fgsm"
    return _momentum(net, x, y, cfg, nesterov, True, name, indices, trace_level,
                     transform_cfg, fia_cfg)


def vni_fgsm(net, x, y, cfg, indices=None, trace_level="summary", transform_cfg=None,
             fia_cfg=None):
    return vmi_fgsm(net, x, y, cfg, True, indices, trace_level, transform_cfg, fia_cfg)


def _direction_tuning(net, x, y, cfg, variance, name, indices, trace_level,
                      transform_cfg, fia_cfg):
    obj, x0, shape, idx = _prepare(net, x, y, cfg, indices, transform_cfg, fia_cfg)
    rngs = example_rngs(cfg.seed, "variance", idx) if variance else None
    trace = AttackTrace(name, trace_level)
    alpha, mu1, mu2, K = cfg.alpha, cfg.decay1, cfg.decay2, cfg.inner_steps
    small = alpha / K
    x_adv = x0.copy()
    g = np.zeros_like(x0)
    v = np.zeros_like(x0)
    for _ in range(cfg.steps):
        obj.begin_step(x_adv)
        g_k, x_k, v_k = g, x_adv, v
        v_next = v
        inner = []
        total = None
        for k in range(K):
            probe = x_k + alpha * mu1 * g_k
            grad = obj.gradient(probe)
            if variance:
                g_k = mu2 * g_k + _normalize(grad + v_k, cfg)
                v_k = _variance(obj, probe, grad, cfg, rngs)
                if k == 0:
                    v_next = v_k
            else:
                g_k = mu2 * g_k + _normalize(grad, cfg)
            inner.append(g_k)
            total = g_k if total is None else total + g_k
            x_k = clip_ball(x0, cfg.eps, x_k + small * sign(g_k))
        g = mu1 * g + total / K
        v = v_next
        x_new = clip_ball(x0, cfg.eps, x_adv + alpha * sign(g))
        trace.record(obj, x0, x_adv, x_new, g, v, inner)
        x_adv = x_new
    return x_adv.reshape(shape), trace


def dta(net, x, y, cfg, indices=None, trace_level="summary", transform_cfg=None,
        fia_cfg=None):
    """Direction tuning: each outer step averages K small-step inner gradients.

    The inner trajectory only places gradient samples; the outer update
    starts again from the outer iterate.
    """
    return _direction_tuning(net, x, y, cfg, False, "dta", indices, trace_level,
                             transform_cfg, fia_cfg)


def vdta(net, x, y, cfg, indices=None, trace_level="summary", transform_cfg=None,
         fia_cfg=None):
    """Direction tuning with a variance term refreshed at every inner probe."""
    return _direction_tuning(net, x, y, cfg, True, "vdta", indices, trace_level,
                             transform_cfg, fia_cfg)


ATTACKS = {
    "fgsm": fgsm,
    "i_fgsm": i_fgsm,
    "mi_fgsm": mi_fgsm,
    "ni_fgsm": ni_fgsm,
    "vmi_fgsm": vmi_fgsm,
    "vni_fgsm": vni_fgsm,
    "dta": dta,
    "vdta": vdta,
}


def run(net, x, y, cfg: AttackConfig, **kwargs):
    """Dispatch on ``cfg.method``."""
    return ATTACKS[cfg.method](net, x, y, cfg, **kwargs)


def expected_grad_calls(cfg: AttackConfig) -> int:
    """Backward passes per example for an untransformed attack."""
    T, K, N = cfg.steps, cfg.inner_steps, cfg.variance_samples
    return {
        "fgsm": 1,
        "i_fgsm": T,
        "mi_fgsm": T,
        "ni_fgsm": T,
        "vmi_fgsm": T * (N + 1),
        "vni_fgsm": T * (N + 1),
        "dta": K * T,
        "vdta": K * T * (N + 1),
    }[cfg.method]
