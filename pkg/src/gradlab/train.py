"""Mini-batch SGD training of surrogate/victim pools."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import Dataset
from .nn import Network, accuracy, forward, he_init, loss_ce, save_network, softmax
from .tensor import make_rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (64, 32)
    epochs: int = 5
    batch_size: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    dataset: str = "blobs"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


def _param_grads(net: Network, tape, d_logits):
    """Gradients of sum(loss) w.r.t. every weight and bias."""
    last = len(net.weights) - 1
    gw, gb = [None] * (last + 1), [None] * (last + 1)
    d_z = d_logits
    for i in range(last, -1, -1):
        a_in = tape.inputs if i == 0 else tape.post[i - 1]
        if i == last and tape.mask is not None:
            a_in = a_in * tape.mask
        gw[i] = a_in.T @ d_z
        gb[i] = d_z.sum(axis=0)
        if i:
            d_a = d_z @ net.weights[i].T
            if i == last and tape.mask is not None:
                d_a = d_a * tape.mask
            d_z = d_a * (tape.pre[i - 1] > 0)
    return gw, gb


def train(cfg: TrainConfig, data: Dataset) -> Network:
    """Train an affine+ReLU classifier on ``data`` with momentum SGD."""
    if len(data) == 0:
        raise TrainingError("empty training set")
    rng = make_rng(cfg.seed, "train")
    widths = [data.flat.shape[1], *cfg.hidden, data.class_count]
    net = he_init(widths, rng)
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    x_all, y_all = data.flat, data.labels
    n = len(y_all)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            cur = Network(tuple(weights), tuple(biases))
            logits, tape = forward(cur, x_all[idx])
            total += float(loss_ce(logits, y_all[idx]).sum())
            d_logits = softmax(logits)
            d_logits[np.arange(len(idx)), y_all[idx]] -= 1.0
            d_logits /= len(idx)
            gw, gb = _param_grads(cur, tape, d_logits)
            for i in range(len(weights)):
                vel_w[i] = cfg.momentum * vel_w[i] - cfg.lr * gw[i]
                vel_b[i] = cfg.momentum * vel_b[i] - cfg.lr * gb[i]
                weights[i] = weights[i] + vel_w[i]
                biases[i] = biases[i] + vel_b[i]
        mean_loss = total / n
        if not np.isfinite(mean_loss) or not all(np.isfinite(w).all() for w in weights):
            raise TrainingError(f"training diverged in epoch {epoch + 1} (loss {mean_loss})")
        log.debug("seed %d epoch %d loss %.4f", cfg.seed, epoch + 1, mean_loss)
    meta = {"seed": cfg.seed, "hidden": list(cfg.hidden), "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "lr": cfg.lr, "momentum": cfg.momentum,
            "dataset": cfg.dataset, "final_loss": mean_loss}
    return Network(tuple(weights), tuple(biases), meta=meta)


@dataclass
class PoolMember:
    name: str
    net: Network
    accuracy: float
    seed: int
    hidden: tuple = field(default=())


def train_pool(base_cfg: TrainConfig, seeds, width_variants, train_data: Dataset,
               test_data: Dataset, min_accuracy: float = 0.90) -> list[PoolMember]:
    """Train one network per (seed, hidden widths) combination.

    Raises ``TrainingError`` listing every member below ``min_accuracy`` on
    ``test_data``.
    """
    combos = [(s, tuple(w)) for s in seeds for w in width_variants]
    if len(set(combos)) < 2:
        raise ValueError("a pool needs at least two distinct (seed, widths) combinations")
    members, failures = [], []
    for k, (seed, hidden) in enumerate(combos):
        cfg = replace(base_cfg, seed=seed, hidden=hidden)
        net = train(cfg, train_data)
        acc = accuracy(net, test_data.images, test_data.labels)
        name = f"m{k:02d}_s{seed}_" + "x".join(str(h) for h in hidden)
        members.append(PoolMember(name, net, acc, seed, hidden))
        if acc < min_accuracy:
            failures.append(f"{name}: {acc:.3f}")
    if failures:
        raise TrainingError("pool members below accuracy floor "
                            f"{min_accuracy:.2f}: " + ", ".join(failures))
    return members


def save_pool(members, out_dir) -> Path:
    """Write checkpoints, ``manifest.txt`` and ``pool_accuracy.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for m in members:
        path = out / f"{m.name}.glnw"
        save_network(m.net, path)
        lines.append(f"{path.name} {m.accuracy:.6f}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    write_pool_csv(members, out / "pool_accuracy.csv")
    return manifest


def write_pool_csv(members, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "seed", "hidden", "accuracy"])
        for m in members:
            w.writerow([m.name, m.seed, "x".join(map(str, m.hidden)), f"{m.accuracy:.6f}"])


def read_manifest(path) -> list[tuple[Path, float]]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        name, acc = line.rsplit(None, 1)
        out.append((path.parent / name, float(acc)))
    return out
