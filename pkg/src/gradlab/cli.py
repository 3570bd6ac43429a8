"""``gradlab`` command line: train, attack, eval and repro.

Exit codes: 0 success, 1 runtime failure (training, missing or corrupt
artifacts), 2 usage or configuration errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import attacks, evalkit, repro
from .config import ConfigError, RunConfig, load_config
from .dataio import Dataset, load_idx, synth_blobs
from .nn import load_network, read_container, take_blocks, write_container
from .tensor import make_rng
from .train import TrainConfig, TrainingError, read_manifest, save_pool, train_pool

BATCH_MAGIC = b"GLAD"
SNAPSHOT = "config.resolved.ini"
SUMMARY_COLUMNS = ("attack", "surrogate", "white_box_asr", "mean_transfer_asr", "grad_calls")


class StageError(RuntimeError):
    pass


# -- data and artifacts --------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Train and evaluation splits; blobs are regenerated from the run seed."""
    n_train = cfg.typed("data", "train_size", int)
    n_eval = cfg.typed("data", "eval_size", int)
    kind = cfg.get("data", "kind")
    if kind == "blobs":
        side = cfg.typed("data", "side", int)
        data = synth_blobs(make_rng(cfg.seed, "data"), n_train + n_eval,
                           cfg.typed("data", "classes", int), h=side, w=side,
                           noise=cfg.typed("data", "noise", float),
                           smooth=cfg.typed("data", "smooth", float),
                           modes=cfg.typed("data", "modes", int))
    elif kind == "idx":
        images, labels = cfg.path("data", "images"), cfg.path("data", "labels")
        if images is None or labels is None:
            raise ConfigError("[data] kind = idx needs images and labels paths")
        try:
            data = load_idx(images, labels)
        except (OSError, ValueError) as exc:
            raise StageError(f"data: {exc}") from None
        if len(data) < n_train + n_eval:
            raise ConfigError(f"[data] needs {n_train + n_eval} examples, file has {len(data)}")
    else:
        raise ConfigError(f"[data] kind must be blobs or idx, not {kind!r}")
    return data.subset(0, n_train), data.subset(n_train, n_train + n_eval)


def pool_dir(cfg: RunConfig) -> Path:
    return cfg.output / "pool"


def load_pool(cfg: RunConfig) -> list[evalkit.Member]:
    manifest = pool_dir(cfg) / "manifest.txt"
    if not manifest.is_file():
        raise StageError(f"no trained pool at {manifest}")
    members = []
    for path, _ in read_manifest(manifest):
        try:
            members.append(evalkit.Member(path.stem, load_network(path)))
        except (OSError, ValueError) as exc:
            raise StageError(f"checkpoint {path}: {exc}") from None
    return members


def save_batch(path, clean, adv, labels, header: dict) -> None:
    clean = np.asarray(clean, dtype=np.float64)
    header = dict(header, shape=list(clean.shape))
    write_container(path, BATCH_MAGIC, header,
                    [clean, np.asarray(adv, dtype=np.float64).reshape(clean.shape),
                     np.asarray(labels, dtype=np.float64)])


def load_batch(path):
    """Read an adversarial batch and re-check the eps-ball and pixel range."""
    header, payload = read_container(path, BATCH_MAGIC)
    shape = tuple(header["shape"])
    clean, adv, labels = take_blocks(payload, [shape, shape, (shape[0],)])
    viol = evalkit.containment_violations(clean, adv, header["eps"])
    if viol:
        raise ValueError(f"{path}: {viol} examples leave the eps-ball or [0, 1]")
    return header, clean, adv, labels.astype(np.int64)


# -- commands -----------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    train_data, eval_data = load_data(cfg)
    base = TrainConfig(epochs=cfg.typed("train", "epochs", int),
                       batch_size=cfg.typed("train", "batch_size", int),
                       lr=cfg.typed("train", "lr", float),
                       momentum=cfg.typed("train", "momentum", float),
                       dataset=cfg.get("data", "kind"))
    seeds = [cfg.seed * 1000 + s for s in cfg.ints("train", "seeds")]
    try:
        members = train_pool(base, seeds, cfg.widths(), train_data, eval_data,
                             cfg.typed("train", "min_accuracy", float))
    except TrainingError as exc:
        raise StageError(f"training failed: {exc}") from None
    manifest = save_pool(members, pool_dir(cfg))
    cfg.write_snapshot(cfg.output / SNAPSHOT)
    for m in members:
        print(f"{m.name}\taccuracy {m.accuracy:.4f}")
    print(f"manifest: {manifest}")
    return 0


def cmd_attack(cfg: RunConfig) -> int:
    acfg = cfg.attack_config()
    members = load_pool(cfg)
    name = cfg.get("attack", "surrogate") or members[0].name
    by_name = {m.name: m for m in members}
    if name not in by_name:
        raise StageError(f"surrogate {name!r} not in pool ({', '.join(by_name)})")
    _, eval_data = load_data(cfg)
    level = cfg.get("attack", "trace")
    x_adv, trace = attacks.run(by_name[name].net, eval_data.flat, eval_data.labels, acfg,
                               trace_level=level, transform_cfg=cfg.transform_config(),
                               fia_cfg=cfg.fia_config())
    out = cfg.output / "attack"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{name}__{acfg.method}"
    calls = trace.total_grad_calls
    save_batch(out / f"{stem}.glad", eval_data.flat, x_adv, eval_data.labels,
               {"surrogate": name, "method": acfg.method, "eps": acfg.eps,
                "grad_calls": calls, "config": acfg.as_dict(),
                "config_hash": evalkit.config_hash(acfg)})
    trace.write_csv(out / f"{stem}_trace.csv")
    load_batch(out / f"{stem}.glad")
    cfg.write_snapshot(cfg.output / SNAPSHOT)
    print(f"{stem}: grad_calls {calls} per example, max linf "
          f"{float(np.max(trace.linf[-1])):.6g}")
    return 0


def _victims(cfg: RunConfig, members):
    spec = cfg.get("eval", "victims")
    if spec == "all":
        chosen = members
    else:
        names = [s.strip() for s in spec.split(",") if s.strip()]
        by_name = {m.name: m for m in members}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise StageError(f"unknown victims {missing}")
        chosen = [by_name[n] for n in names]
    if not chosen:
        raise ConfigError("[eval] victim list is empty")
    return chosen


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.get("eval", "victims").strip(" ,"):
        raise ConfigError("[eval] victim list is empty")
    members = load_pool(cfg)
    victims = _victims(cfg, members)
    out = cfg.output / "eval"
    out.mkdir(parents=True, exist_ok=True)
    batch_spec = cfg.get("eval", "batches")
    if batch_spec:
        paths = [Path(p.strip()) for p in batch_spec.split(",") if p.strip()]
    else:
        paths = sorted((cfg.output / "attack").glob("*.glad"))
    if not paths:
        raise StageError("no adversarial batches to evaluate")
    by_name = {m.name: m for m in members}
    rows, cells = [], {}
    for path in paths:
        try:
            header, clean, adv, labels = load_batch(path)
        except (OSError, ValueError) as exc:
            raise StageError(f"batch {path}: {exc}") from None
        flat = clean.reshape(len(clean), -1)
        data = Dataset(flat.reshape(len(flat), *_square(flat.shape[1])), labels,
                       int(labels.max()) + 1)
        sur = header["surrogate"]
        scores = {v.name: evalkit.asr(v.net, data, adv) for v in victims}
        cells.setdefault(header["method"], {})[sur] = scores
        white = evalkit.asr(by_name[sur].net, data, adv) if sur in by_name else float("nan")
        transfer = [s for n, s in scores.items() if n != sur]
        rows.append((header["method"], sur, white,
                     float(np.mean(transfer)) if transfer else float("nan"),
                     header["grad_calls"]))
    rows.sort()
    names = [v.name for v in victims]
    for method, table in sorted(cells.items()):
        with open(out / f"transfer_{method}.csv", "w", newline="") as fh:
            fh.write("surrogate," + ",".join(names) + "\n")
            for sur in sorted(table):
                fh.write(sur + "," + ",".join(f"{table[sur][n]:.4f}" for n in names) + "\n")
    with open(out / "summary.csv", "w") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]:.4f},{r[3]:.4f},{r[4]}\n")
    _run_sweeps(cfg, members, out)
    cfg.write_snapshot(cfg.output / SNAPSHOT)
    print(f"{'attack':<10} {'surrogate':<24} {'white-box':>9} {'transfer':>9} {'grad calls':>10}")
    for r in rows:
        print(f"{r[0]:<10} {r[1]:<24} {r[2]:>9.2f} {r[3]:>9.2f} {r[4]:>10}")
    return 0


def _square(d):
    side = int(round(d ** 0.5))
    return (side, side) if side * side == d else (1, d)


def _run_sweeps(cfg: RunConfig, members, out: Path) -> None:
    alphas = cfg.floats("eval", "alphas")
    grids = {"K": cfg.floats("eval", "k_grid"), "mu2": cfg.floats("eval", "mu2_grid"),
             "gamma": cfg.floats("eval", "gamma_grid")}
    if not alphas and not any(grids.values()):
        return
    _, eval_data = load_data(cfg)
    pool = evalkit.Pool(cfg.seed, members, eval_data)
    base = cfg.attack_config()
    if alphas:
        methods = [m.strip() for m in cfg.get("eval", "sweep_methods").split(",") if m.strip()]
        try:
            cfgs = {m: attacks.AttackConfig(**dict(base.as_dict(), method=m)) for m in methods}
        except ValueError as exc:
            raise ConfigError(f"[eval] sweep_methods: {exc}") from None
        curves = evalkit.step_length_sweep([pool], sorted(alphas), cfgs)
        evalkit.write_sweep_csv(curves, out / "alpha_sweep.csv")
    if base.method not in ("dta", "vdta"):
        base = attacks.AttackConfig(**dict(base.as_dict(), method="dta"))
    curves = [evalkit.sensitivity_sweep(p, sorted(g), [pool], base)
              for p, g in grids.items() if g]
    if curves:
        evalkit.write_sweep_csv(curves, out / "sensitivity.csv")


def cmd_repro(suite: str, out_dir: Path, pools: int | None) -> int:
    if suite not in repro.SUITES:
        print(f"error: unknown suite {suite!r}; choose from {', '.join(repro.SUITES)}",
              file=sys.stderr)
        return 2
    preset = repro.DESK if pools is None else repro.with_overrides(repro.DESK, pools=pools)
    try:
        built = repro.build_pools(preset)
    except Exception as exc:  # any failure names its stage
        print(f"error: stage train failed: {exc}", file=sys.stderr)
        return 1
    try:
        result = repro.run_suite(suite, preset, built)
    except Exception as exc:
        print(f"error: stage attack/eval failed: {exc}", file=sys.stderr)
        return 1
    report = repro.write_suite_outputs(result, out_dir)
    with open(out_dir / "preset.txt", "w") as fh:
        for k, v in vars(preset).items():
            fh.write(f"{k} = {v}\n")
    sys.stdout.write(result.report())
    print(f"report: {report}")
    failed = [c.number for c in result.criteria if not c.passed]
    if failed:
        print(f"error: stage report: criteria {failed} failed", file=sys.stderr)
        return 1
    return 0


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "attack", "eval"):
        s = sub.add_parser(name)
        s.add_argument("config", help="INI run configuration")
    r = sub.add_parser("repro", help="run a frozen desk-scale suite")
    r.add_argument("suite", help=", ".join(repro.SUITES))
    r.add_argument("--out", default="gradlab-repro", help="output directory")
    r.add_argument("--pools", type=int, default=None, help="override the pool count")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "repro":
        return cmd_repro(args.suite, Path(args.out), args.pools)
    try:
        cfg = load_config(args.config)
        # the environment variable wins over the config key
        os.environ.setdefault("GRADLAB_THREADS", str(max(1, cfg.threads)))
        return {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval}[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
