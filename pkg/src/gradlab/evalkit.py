"""Transfer evaluation, gradient alignment, steepest-speed probes and sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, nn
from .dataio import Dataset
from .objectives import NetObjective, Objective
from .tensor import sign


class EvaluationError(ValueError):
    pass


@dataclass
class Member:
    name: str
    net: nn.Network


@dataclass
class Pool:
    """Surrogate/victim networks sharing one evaluation set."""
    seed: int
    members: list
    eval_data: Dataset


@dataclass
class TransferReport:
    surrogate: str
    attack: str
    victim_asr: dict  # victim name -> ASR percent
    white_box_asr: float
    grad_calls: int
    config_hash: str
    seed: int
    alignment: dict = field(default_factory=dict)  # victim name -> nu
    diagnostics: object = None

    @property
    def transfer_asr(self) -> float:
        vals = [v for k, v in self.victim_asr.items() if k != self.surrogate]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def transfer_nu(self) -> float:
        vals = [v for k, v in self.alignment.items() if k != self.surrogate]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class SweepCurve:
    parameter: str
    grid: list
    mean: list
    per_seed: dict  # seed -> list of values aligned with grid
    label: str = ""

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("sweep grid must be strictly increasing")


def config_hash(cfg) -> str:
    payload = json.dumps(cfg if isinstance(cfg, dict) else cfg.as_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def thread_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("GRADLAB_THREADS", default)))
    except ValueError:
        return default


# -- attack success ---------------------------------------------------------

def asr(victim: nn.Network, clean: Dataset, adv) -> float:
    """Percent of adversarial inputs misclassified, over the examples the
    victim gets right when clean."""
    x = clean.flat
    adv = np.asarray(adv, dtype=np.float64).reshape(x.shape)
    eligible = nn.predict(victim, x) == clean.labels
    if not eligible.any():
        raise EvaluationError("victim classifies no clean example correctly")
    fooled = nn.predict(victim, adv[eligible]) != clean.labels[eligible]
    return 100.0 * float(np.mean(fooled))


# -- alignment --------------------------------------------------------------

def _cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    ok = (na > 0) & (nb > 0)
    out = np.zeros_like(dot)
    out[ok] = dot[ok] / (na[ok] * nb[ok])
    return np.clip(out, -1.0, 1.0)


def alignment_nu(traces, victim, y=None) -> float:
    """Mean cosine between the attack's update gradient and the victim's
    plain loss gradient at the same iterate, over all examples and steps.

    ``victim`` is a network (then ``y`` is required) or an objective bound
    to the same examples. Pairs with a zero vector contribute 0.
    """
    if isinstance(traces, attacks.AttackTrace):
        traces = [traces]
    cosines = []
    for trace in traces:
        if not trace.g:
            raise EvaluationError("trace has no recorded gradients (use trace_level='full')")
        obj = victim if isinstance(victim, Objective) else NetObjective(victim, y)
        for x_from, g in zip(trace.x_from, trace.g):
            cosines.append(_cosines(g, obj.gradient(x_from)).ravel())
    if not cosines:
        raise EvaluationError("empty trace set")
    return float(np.mean(np.concatenate(cosines)))


# -- steepest convergence speed ----------------------------------------------

def _loss_fn(net, y):
    if callable(net) and not isinstance(net, (nn.Network, Objective)):
        return net
    if isinstance(net, Objective):
        return lambda pts: net.value(pts[None])[0]
    return lambda pts: nn.loss_ce(nn.forward(net, pts)[0], np.full(len(pts), int(y)))


def steepest_speed_sweep(net, x, y, alphas, samples: int, rng) -> list[float]:
    """Nested estimates of the steepest loss-change rate for growing radii.

    For each radius (sorted ascending) ``samples`` fresh points are drawn
    uniformly from the box ``[x - alpha, x + alpha]``; every point drawn for
    a smaller radius also lies in the larger box and is kept, so the
    candidate sets are nested and the estimates cannot decrease.
    ``net`` may be a network (with label ``y``), an objective for one example,
    or a callable mapping an ``(n, d)`` array to ``n`` losses.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    alphas = list(alphas)
    if any(a <= 0 for a in alphas):
        raise ValueError("alpha must be positive")
    order = np.argsort(alphas, kind="stable")
    f = _loss_fn(net, y)
    x = np.asarray(x, dtype=np.float64).ravel()
    base = float(np.asarray(f(x[None]))[0])
    out = [0.0] * len(alphas)
    best = 0.0
    for i in order:
        a = alphas[i]
        pts = x + rng.uniform(-a, a, size=(samples, x.size))
        dist = np.linalg.norm(pts - x, axis=1)
        vals = np.asarray(f(pts), dtype=np.float64)
        ok = dist > 0
        if ok.any():
            best = max(best, float(np.max(np.abs(base - vals[ok]) / dist[ok])))
        out[i] = best
    return out


def steepest_speed(net, x, y, alpha: float, samples: int, rng) -> float:
    return steepest_speed_sweep(net, x, y, [alpha], samples, rng)[0]


# -- direction diagnostics --------------------------------------------------

@dataclass
class DirectionReport:
    """Per (step, example) checks of the averaged-direction properties.

    ``accurate`` holds whether the sign of the averaged inner gradient is at
    least as aligned with the small-step path as the first inner gradient's
    sign; ``oscillation`` whether the averaged step is at least as long as
    the small-step path. ``full_support`` marks pairs where no inner
    gradient has a zero component.
    """
    accurate: np.ndarray  # (T, B) bool
    oscillation: np.ndarray  # (T, B) bool
    full_support: np.ndarray  # (T, B) bool
    cos_tuned: np.ndarray
    cos_first: np.ndarray

    @property
    def accurate_rate(self) -> float:
        return float(np.mean(self.accurate))

    @property
    def oscillation_rate(self) -> float:
        sel = self.full_support
        return float(np.mean(self.oscillation[sel])) if sel.any() else float("nan")

    def summary(self) -> dict:
        return {"steps": int(self.accurate.size), "accurate_rate": self.accurate_rate,
                "oscillation_rate": self.oscillation_rate,
                "full_support_steps": int(self.full_support.sum())}


def direction_diagnostics(trace) -> DirectionReport:
    """Evaluate the angle and moving-distance comparisons on a DTA trace.

    For inner gradients g_1..g_K of one outer step, with path
    ``S = sum_k sign(g_k)``: the tuned step ``sign(mean g_k)`` should make a
    smaller angle with ``S`` than ``sign(g_1)``, and
    ``||sign(mean g)|| = ||sign(g_1)|| >= ||S|| / K``. Norms are compared in
    exact integer arithmetic.
    """
    if not trace.inner_g:
        raise EvaluationError("trace lacks inner gradients (use trace_level='inner')")
    acc, osc, full, c_t, c_f = [], [], [], [], []
    for inner in trace.inner_g:  # (K, B, d)
        K = inner.shape[0]
        s = sign(inner).astype(np.int64)
        path = s.sum(axis=0)
        tuned = sign(inner.mean(axis=0)).astype(np.int64)
        first = s[0]
        cos_t = _cosines(tuned.astype(np.float64), path.astype(np.float64))
        cos_f = _cosines(first.astype(np.float64), path.astype(np.float64))
        acc.append(cos_t >= cos_f)
        tuned_sq = np.sum(tuned * tuned, axis=-1)
        first_sq = np.sum(first * first, axis=-1)
        path_sq = np.sum(path * path, axis=-1)
        osc.append((tuned_sq == first_sq) & (K * K * first_sq >= path_sq))
        full.append(np.all(s != 0, axis=(0, 2)))
        c_t.append(cos_t)
        c_f.append(cos_f)
    return DirectionReport(np.array(acc), np.array(osc), np.array(full),
                           np.array(c_t), np.array(c_f))


# -- transfer matrix ----------------------------------------------------------

@dataclass
class TransferRun:
    attack: str
    reports: list
    adversarial: dict  # surrogate name -> adversarial batch
    containment_violations: int

    @property
    def mean_transfer_asr(self) -> float:
        return float(np.mean([r.transfer_asr for r in self.reports]))

    @property
    def mean_transfer_nu(self) -> float:
        return float(np.mean([r.transfer_nu for r in self.reports]))

    def matrix(self, names) -> np.ndarray:
        by = {r.surrogate: r for r in self.reports}
        return np.array([[by[s].victim_asr[v] for v in names] for s in names])


def containment_violations(x0, x_adv, eps, tol=1e-12) -> int:
    x0 = np.asarray(x0).reshape(len(x0), -1)
    x_adv = np.asarray(x_adv).reshape(x0.shape)
    bad = (np.abs(x_adv - x0).max(axis=1) > eps + tol) | (x_adv.min(axis=1) < 0) | \
          (x_adv.max(axis=1) > 1)
    return int(bad.sum())


def _attack_surrogate(member, members, data, cfg, name, alignment, diagnostics,
                      transform_cfg, fia_cfg, seed):
    level = "inner" if diagnostics and cfg.method in ("dta", "vdta") else (
        "full" if alignment else "summary")
    x_adv, trace = attacks.run(member.net, data.flat, data.labels, cfg, trace_level=level,
                               transform_cfg=transform_cfg, fia_cfg=fia_cfg)
    victim_asr, nus = {}, {}
    for victim in members:
        victim_asr[victim.name] = asr(victim.net, data, x_adv)
        if alignment:
            nus[victim.name] = alignment_nu(trace, victim.net, data.labels)
    diag = direction_diagnostics(trace) if level == "inner" else None
    report = TransferReport(member.name, name, victim_asr, victim_asr[member.name],
                            trace.total_grad_calls, config_hash(cfg), seed, nus, diag)
    viol = containment_violations(data.flat, x_adv, cfg.eps)
    return report, x_adv, viol


def transfer_matrix(pool, attack_cfgs: dict, data: Dataset | None = None, alignment=False,
                    diagnostics=False, transform_cfg=None, fia_cfg=None, threads=None):
    """Attack with every pool member in turn and score against all members.

    ``pool`` is a :class:`Pool` or a list of members; ``attack_cfgs`` maps a
    label to an :class:`AttackConfig`. Returns ``{label: TransferRun}``; the
    diagonal of each matrix is the white-box ASR.
    """
    if isinstance(pool, Pool):
        members, data, seed = pool.members, data or pool.eval_data, pool.seed
    else:
        members, seed = list(pool), 0
    if len(members) < 2:
        raise EvaluationError("transfer evaluation needs at least two networks")
    if data is None:
        raise EvaluationError("no evaluation data")
    threads = threads or thread_count()
    out = {}
    for label, cfg in attack_cfgs.items():
        jobs = [(m, members, data, cfg, label, alignment, diagnostics, transform_cfg,
                 fia_cfg, seed) for m in members]
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(lambda a: _attack_surrogate(*a), jobs))
        else:
            results = [_attack_surrogate(*j) for j in jobs]
        out[label] = TransferRun(label, [r[0] for r in results],
                                 {r[0].surrogate: r[1] for r in results},
                                 sum(r[2] for r in results))
    return out


# -- sweeps -------------------------------------------------------------------

def step_length_sweep(pools, alphas, base_cfgs: dict, eps: float | None = None):
    """Mean transfer ASR per (attack, alpha) with ``T = round(eps / alpha)``.

    ``alphas`` are absolute step lengths; ``base_cfgs`` maps labels to
    configs whose ``eps`` is used unless ``eps`` is given.
    """
    curves = []
    for label, base in base_cfgs.items():
        e = base.eps if eps is None else eps
        per_seed = {}
        for pool in pools:
            vals = []
            for a in alphas:
                steps = max(1, int(round(e / a)))
                cfg = replace(base, eps=e, steps=steps, step_len=a)
                run = transfer_matrix(pool, {label: cfg})[label]
                vals.append(run.mean_transfer_asr)
            per_seed[pool.seed] = vals
        mean = list(np.mean([per_seed[p.seed] for p in pools], axis=0))
        curves.append(SweepCurve("alpha", list(alphas), mean, per_seed, label))
    return curves


SENSITIVITY_FIELDS = {"K": "inner_steps", "mu2": "decay2", "gamma": "prune_rate"}


def sensitivity_sweep(parameter: str, grid, pools, base_cfg, label=None) -> SweepCurve:
    """Mean transfer ASR as one of K, mu2 or gamma varies, all else fixed."""
    if parameter not in SENSITIVITY_FIELDS:
        raise ValueError(f"parameter must be one of {sorted(SENSITIVITY_FIELDS)}")
    fname = SENSITIVITY_FIELDS[parameter]
    per_seed = {}
    for pool in pools:
        vals = []
        for value in grid:
            value = int(value) if parameter == "K" else float(value)
            cfg = replace(base_cfg, **{fname: value})
            vals.append(transfer_matrix(pool, {"x": cfg})["x"].mean_transfer_asr)
        per_seed[pool.seed] = vals
    mean = list(np.mean([per_seed[p.seed] for p in pools], axis=0))
    return SweepCurve(parameter, list(grid), mean, per_seed, label or base_cfg.method)


# -- CSV ------------------------------------------------------------------------

def write_transfer_csv(run: TransferRun, names, path) -> None:
    """Rows are surrogates, columns victims, cells ASR percent."""
    mat = run.matrix(names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["surrogate", *names])
        for name, row in zip(names, mat):
            w.writerow([name, *[f"{v:.4f}" for v in row]])


def write_sweep_csv(curves, path) -> None:
    """Columns: attack, parameter, value, mean, then one column per seed."""
    curves = list(curves)
    seeds = sorted({s for c in curves for s in c.per_seed})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "parameter", "value", "mean", *[f"seed_{s}" for s in seeds]])
        for c in curves:
            for i, value in enumerate(c.grid):
                w.writerow([c.label, c.parameter, repr(float(value)), f"{c.mean[i]:.4f}",
                            *[f"{c.per_seed[s][i]:.4f}" if s in c.per_seed else ""
                              for s in seeds]])
