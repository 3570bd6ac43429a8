"""Run configuration: INI files with one section per pipeline stage.

Every key is optional; missing keys take the defaults in ``DEFAULTS``.
Lists are comma separated and hidden-width variants are written ``128x64``.
Example::

    [run]
    seed = 0
    output = runs/demo

    [train]
    widths = 128x64, 96x48
    seeds = 0, 1

    [attack]
    method = dta
    eps = 0.1
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .attacks import AttackConfig
from .surgery import FiaConfig
from .transforms import TransformConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "run": {"seed": "0", "output": "gradlab-run", "threads": "1"},
    "data": {"kind": "blobs", "train_size": "2000", "eval_size": "200", "classes": "10",
             "side": "28", "noise": "0.6", "smooth": "1.0", "modes": "4",
             "images": "", "labels": ""},
    "train": {"widths": "128x64", "seeds": "0, 1, 2", "epochs": "5", "batch_size": "64",
              "lr": "0.02", "momentum": "0.9", "min_accuracy": "0.9"},
    "attack": {"surrogate": "", "method": "i_fgsm", "eps": "0.1", "steps": "10",
               "step_len": "", "decay1": "1.0", "decay2": "0.0", "inner_steps": "10",
               "beta": "1.5", "variance_samples": "5", "loss": "ce", "transform": "none",
               "prune_rate": "0.0", "grad_norm": "mean", "trace": "summary"},
    "transforms": {"dim_probability": "0.5", "dim_resize_high": "", "sim_copies": "5",
                   "tim_kernel_size": "7", "tim_sigma": ""},
    "fia": {"drop_probability": "0.1", "ensemble_size": "30"},
    "eval": {"victims": "all", "batches": "", "alphas": "", "sweep_methods": "mi_fgsm, ni_fgsm",
             "k_grid": "", "mu2_grid": "", "gamma_grid": ""},
}


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _widths(text: str) -> list[tuple[int, ...]]:
    out = []
    for item in text.split(","):
        item = item.strip()
        if item:
            out.append(tuple(int(w) for w in item.split("x")))
    return out


def _opt_float(text: str):
    return float(text) if text.strip() else None


def _opt_int(text: str):
    return int(text) if text.strip() else None


@dataclass
class RunConfig:
    parser: configparser.ConfigParser
    source: Path | None = None

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key).strip()

    def typed(self, section, key, conv):
        raw = self.get(section, key)
        try:
            return conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None

    @property
    def seed(self) -> int:
        return self.typed("run", "seed", int)

    @property
    def output(self) -> Path:
        out = Path(self.get("run", "output"))
        if not out.is_absolute() and self.source is not None:
            out = self.source.parent / out
        return out

    @property
    def threads(self) -> int:
        return self.typed("run", "threads", int)

    def path(self, section, key) -> Path | None:
        raw = self.get(section, key)
        if not raw:
            return None
        p = Path(raw)
        if not p.is_absolute() and self.source is not None:
            p = self.source.parent / p
        return p

    def attack_config(self) -> AttackConfig:
        a = lambda k, conv: self.typed("attack", k, conv)  # noqa: E731
        if not a("eps", float) > 0:
            raise ConfigError("[attack] eps must be positive")
        try:
            return AttackConfig(
                method=self.get("attack", "method"), eps=a("eps", float), steps=a("steps", int),
                step_len=a("step_len", _opt_float), decay1=a("decay1", float),
                decay2=a("decay2", float), inner_steps=a("inner_steps", int),
                beta=a("beta", float), variance_samples=a("variance_samples", int),
                loss_kind=self.get("attack", "loss"), transform=self.get("attack", "transform"),
                prune_rate=a("prune_rate", float), grad_norm=self.get("attack", "grad_norm"),
                seed=self.seed)
        except ValueError as exc:
            raise ConfigError(f"[attack] {exc}") from None

    def transform_config(self) -> TransformConfig:
        t = lambda k, conv: self.typed("transforms", k, conv)  # noqa: E731
        try:
            return TransformConfig(
                dim_probability=t("dim_probability", float),
                dim_resize_high=t("dim_resize_high", _opt_int),
                sim_copies=t("sim_copies", int), tim_kernel_size=t("tim_kernel_size", int),
                tim_sigma=t("tim_sigma", _opt_float))
        except ValueError as exc:
            raise ConfigError(f"[transforms] {exc}") from None

    def fia_config(self) -> FiaConfig:
        try:
            return FiaConfig(drop_probability=self.typed("fia", "drop_probability", float),
                             ensemble_size=self.typed("fia", "ensemble_size", int),
                             seed=self.seed)
        except ValueError as exc:
            raise ConfigError(f"[fia] {exc}") from None

    def floats(self, section, key) -> list[float]:
        return self.typed(section, key, _floats)

    def ints(self, section, key) -> list[int]:
        return self.typed(section, key, _ints)

    def widths(self) -> list[tuple[int, ...]]:
        return self.typed("train", "widths", _widths)

    def write_snapshot(self, path) -> None:
        """Write every key, defaults included, so the run replays from this file alone."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        snap = configparser.ConfigParser()
        for section in self.parser.sections():
            snap[section] = dict(self.parser[section])
        snap["run"]["output"] = str(self.output.resolve())
        for section, key in (("data", "images"), ("data", "labels")):
            p = self.path(section, key)
            if p is not None:
                snap[section][key] = str(p.resolve())
        with open(path, "w") as fh:
            snap.write(fh)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_dict(DEFAULTS)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = [s for s in parser.sections() if s not in DEFAULTS]
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}")
    for section in DEFAULTS:
        extra = set(parser[section]) - set(DEFAULTS[section])
        if extra:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(extra)}")
    return RunConfig(parser, path)
