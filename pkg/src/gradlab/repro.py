"""Frozen desk-scale experiment suites and their pass/fail checks."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import attacks, evalkit
from .dataio import synth_blobs
from .nn import accuracy
from .tensor import make_rng
from .train import TrainConfig, TrainingError, train

SUITES = ("transfer", "alpha-sweep", "sensitivity", "alignment")
TRANSFER_METHODS = ("i_fgsm", "mi_fgsm", "ni_fgsm", "dta", "vmi_fgsm", "vni_fgsm", "vdta")


@dataclass(frozen=True)
class DeskPreset:
    """Data, pool and attack settings shared by all suites."""
    pools: int = 5
    train_size: int = 2000
    eval_size: int = 200
    classes: int = 10
    side: int = 28
    noise: float = 0.6
    smooth: float = 1.0
    modes: int = 4
    hidden_variants: tuple = ((128, 64), (128, 64), (128, 64))
    epochs: int = 5
    lr: float = 0.02
    min_accuracy: float = 0.9
    eps: float = 0.1
    steps: int = 10
    variance_samples: int = 5
    prune_rate: float = 0.9
    attack_seed: int = 0

    def attack(self, method: str, **overrides) -> attacks.AttackConfig:
        base = dict(method=method, eps=self.eps, steps=self.steps,
                    variance_samples=self.variance_samples, seed=self.attack_seed)
        if method == "vdta":
            base.update(attacks.VDTA_DEFAULTS)
        elif method == "dta":
            base.update(attacks.DTA_DEFAULTS)
        base.update(overrides)
        return attacks.AttackConfig(**base)


DESK = DeskPreset()


def build_pool(preset: DeskPreset, seed: int) -> evalkit.Pool:
    """Synthesize one dataset and train one network per width variant."""
    n = preset.train_size + preset.eval_size
    data = synth_blobs(make_rng(seed, "data"), n, preset.classes, h=preset.side, w=preset.side,
                       noise=preset.noise, smooth=preset.smooth, modes=preset.modes)
    train_data = data.subset(0, preset.train_size)
    eval_data = data.subset(preset.train_size, n)
    members = []
    for k, hidden in enumerate(preset.hidden_variants):
        cfg = TrainConfig(hidden=tuple(hidden), epochs=preset.epochs, lr=preset.lr,
                          seed=1000 * seed + k)
        net = train(cfg, train_data)
        acc = accuracy(net, eval_data.images, eval_data.labels)
        if acc < preset.min_accuracy:
            raise TrainingError(f"pool {seed} member {k} accuracy {acc:.3f} below "
                                f"{preset.min_accuracy}")
        members.append(evalkit.Member(f"p{seed}_m{k}_" + "x".join(map(str, hidden)), net))
    return evalkit.Pool(seed, members, eval_data)


def build_pools(preset: DeskPreset = DESK, seeds=None) -> list[evalkit.Pool]:
    seeds = range(preset.pools) if seeds is None else seeds
    return [build_pool(preset, s) for s in seeds]


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.number:>2} {self.name}: {'PASS' if self.passed else 'FAIL'} ({self.detail})"


@dataclass
class SuiteResult:
    suite: str
    criteria: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    violations: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)

    def report(self) -> str:
        lines = [f"suite {self.suite} ({self.seconds:.0f} s)"]
        lines += [c.line() for c in self.criteria]
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _strict_chain(means: dict, chain) -> tuple[bool, str]:
    gaps = [means[a] - means[b] for a, b in zip(chain, chain[1:])]
    text = " > ".join(f"{m}={means[m]:.3f}" for m in chain)
    return all(g > 0 for g in gaps), text


def _containment(result: SuiteResult) -> Criterion:
    return Criterion(11, "eps-ball containment", result.violations == 0,
                     f"{result.violations} violations")


# -- transfer ------------------------------------------------------------------

def transfer_suite(pools, preset: DeskPreset = DESK) -> SuiteResult:
    """Criteria 5, 6, 7, 10 and 11 from one set of transfer runs."""
    t0 = time.time()
    res = SuiteResult("transfer")
    cfgs = {m: preset.attack(m) for m in TRANSFER_METHODS}
    cfgs["dta_np"] = preset.attack("dta", prune_rate=preset.prune_rate)
    asr = {k: [] for k in cfgs}
    nu = {k: [] for k in cfgs}
    calls = {}
    rates_acc, osc_ok, osc_n = [], 0, 0
    for pool in pools:
        runs = evalkit.transfer_matrix(pool, cfgs, alignment=True, diagnostics=True)
        for label, run in runs.items():
            asr[label].append(run.mean_transfer_asr)
            nu[label].append(run.mean_transfer_nu)
            calls[label] = run.reports[0].grad_calls
            res.violations += run.containment_violations
            for rep in run.reports:
                if rep.diagnostics is not None and label == "dta":
                    d = rep.diagnostics
                    rates_acc.append(d.accurate_rate)
                    osc_ok += int(d.oscillation[d.full_support].sum())
                    osc_n += int(d.full_support.sum())
    mean_asr = {k: float(np.mean(v)) for k, v in asr.items()}
    mean_nu = {k: float(np.mean(v)) for k, v in nu.items()}
    res.tables = {"asr": asr, "nu": nu, "mean_asr": mean_asr, "mean_nu": mean_nu,
                  "grad_calls": calls}
    ok1, t1 = _strict_chain(mean_asr, ("dta", "ni_fgsm", "mi_fgsm", "i_fgsm"))
    ok2, t2 = _strict_chain(mean_asr, ("vdta", "vni_fgsm", "vmi_fgsm"))
    res.criteria.append(Criterion(5, "transfer ordering", ok1 and ok2, f"{t1}; {t2}"))
    gap = mean_asr["dta_np"] - mean_asr["dta"]
    res.criteria.append(Criterion(6, "NP effect", gap >= -2.0, f"DTA+NP - DTA = {gap:+.3f}"))
    ok, t = _strict_chain(mean_nu, ("dta", "ni_fgsm", "mi_fgsm", "i_fgsm"))
    res.criteria.append(Criterion(7, "alignment ordering", ok, t))
    osc_rate = osc_ok / osc_n if osc_n else float("nan")
    res.criteria.append(Criterion(
        10, "oscillation inequality", osc_n > 0 and osc_ok == osc_n,
        f"{osc_ok}/{osc_n} full-support steps; angle majority rate "
        f"{float(np.mean(rates_acc)):.3f}"))
    res.criteria.append(_containment(res))
    res.notes.append("grad calls per example: " + ", ".join(
        f"{k}={v}" for k, v in calls.items()))
    cfg = cfgs["vdta"]
    res.notes.append(f"vdta counts K*T*(N+1) = {attacks.expected_grad_calls(cfg)}; "
                     f"the reference figure K*T*N = "
                     f"{cfg.inner_steps * cfg.steps * cfg.variance_samples} omits the "
                     "gradient at each probe itself")
    res.seconds = time.time() - t0
    return res


def alignment_suite(pools, preset: DeskPreset = DESK) -> SuiteResult:
    t0 = time.time()
    res = SuiteResult("alignment")
    chain = ("dta", "ni_fgsm", "mi_fgsm", "i_fgsm")
    nu = {k: [] for k in chain}
    asr = {k: [] for k in chain}
    for pool in pools:
        runs = evalkit.transfer_matrix(pool, {m: preset.attack(m) for m in chain},
                                       alignment=True)
        for label, run in runs.items():
            nu[label].append(run.mean_transfer_nu)
            asr[label].append(run.mean_transfer_asr)
            res.violations += run.containment_violations
    mean_nu = {k: float(np.mean(v)) for k, v in nu.items()}
    mean_asr = {k: float(np.mean(v)) for k, v in asr.items()}
    res.tables = {"nu": nu, "asr": asr, "mean_nu": mean_nu, "mean_asr": mean_asr}
    ok, t = _strict_chain(mean_nu, chain)
    res.criteria.append(Criterion(7, "alignment ordering", ok, t))
    res.criteria.append(_containment(res))
    res.seconds = time.time() - t0
    return res


# -- sweeps --------------------------------------------------------------------

def alpha_sweep_suite(pools, preset: DeskPreset = DESK, divisors=(100, 10)) -> SuiteResult:
    """Transfer ASR of MI and NI at alpha = eps/100 against eps/10."""
    t0 = time.time()
    res = SuiteResult("alpha-sweep")
    alphas = sorted(preset.eps / k for k in divisors)
    base = {m: preset.attack(m) for m in ("mi_fgsm", "ni_fgsm")}
    curves = evalkit.step_length_sweep(pools, alphas, base)
    res.tables["curves"] = curves
    small, large = alphas.index(preset.eps / 100), alphas.index(preset.eps / 10)
    ok = all(c.mean[small] < c.mean[large] for c in curves)
    detail = "; ".join(f"{c.label}: eps/100={c.mean[small]:.3f} < eps/10={c.mean[large]:.3f}"
                       for c in curves)
    res.criteria.append(Criterion(9, "step-length sweep", ok, detail))
    res.criteria.append(_containment(res))
    res.seconds = time.time() - t0
    return res


def sensitivity_suite(pools, preset: DeskPreset = DESK) -> SuiteResult:
    """K and gamma anchors plus the K = 10 against K = 1 direction."""
    t0 = time.time()
    res = SuiteResult("sensitivity")
    dta = preset.attack("dta")
    k_curve = evalkit.sensitivity_sweep("K", [1, 10], pools, dta)
    g_curve = evalkit.sensitivity_sweep("gamma", [0.0, preset.prune_rate], pools, dta)
    ni, plain = [], []
    for pool in pools:
        runs = evalkit.transfer_matrix(pool, {"ni": preset.attack("ni_fgsm"), "dta": dta})
        ni.append(runs["ni"].mean_transfer_asr)
        plain.append(runs["dta"].mean_transfer_asr)
        res.violations += runs["ni"].containment_violations + runs["dta"].containment_violations
    res.tables = {"K": k_curve, "gamma": g_curve, "ni": ni, "dta": plain}
    k1 = [k_curve.per_seed[p.seed][0] for p in pools]
    g0 = [g_curve.per_seed[p.seed][0] for p in pools]
    anchors = k1 == ni and g0 == plain
    up = k_curve.mean[1] > k_curve.mean[0]
    res.criteria.append(Criterion(
        12, "sensitivity anchors", anchors and up,
        f"K=1 equals NI: {k1 == ni}; gamma=0 equals no-NP: {g0 == plain}; "
        f"K=10 {k_curve.mean[1]:.3f} vs K=1 {k_curve.mean[0]:.3f}"))
    res.criteria.append(_containment(res))
    res.seconds = time.time() - t0
    return res


SUITE_FUNCS = {
    "transfer": transfer_suite,
    "alpha-sweep": alpha_sweep_suite,
    "sensitivity": sensitivity_suite,
    "alignment": alignment_suite,
}


def run_suite(name: str, preset: DeskPreset = DESK, pools=None) -> SuiteResult:
    if name not in SUITE_FUNCS:
        raise KeyError(name)
    pools = build_pools(preset) if pools is None else pools
    return SUITE_FUNCS[name](pools, preset)


def write_suite_outputs(result: SuiteResult, out_dir) -> Path:
    """Write the report text and plot-ready CSVs for a finished suite."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(result.report())
    t = result.tables
    if "curves" in t:
        evalkit.write_sweep_csv(t["curves"], out / "alpha_sweep.csv")
    if "K" in t:
        evalkit.write_sweep_csv([t["K"], t["gamma"]], out / "sensitivity.csv")
    if "mean_asr" in t:
        with open(out / "summary.csv", "w") as fh:
            fh.write("attack,mean_transfer_asr,mean_nu\n")
            for k in t["mean_asr"]:
                nu = t.get("mean_nu", {}).get(k, float("nan"))
                fh.write(f"{k},{t['mean_asr'][k]:.4f},{nu:.6f}\n")
    return out / "report.txt"


def with_overrides(preset: DeskPreset, **kw) -> DeskPreset:
    return replace(preset, **kw)
