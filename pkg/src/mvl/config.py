"""Experiment config files: INI sections with typed ``key = value`` lines.

Values are parsed as int, float, bool (true/false/yes/no), a comma-separated
list of those, or a bare string. See README for the recognized sections.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .autoencoder import AEConfig
from .estimators import EstimatorConfig
from .samplers import KernelConfig
from .training import TrainConfig

EXPERIMENTS = ("train", "sweep-bias-variance", "density", "demo-ae", "cd1-compare")
OUTPUT_ENV = "MVL_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def parse_value(text: str):
    if "," in text:
        return [parse_scalar(p) for p in text.split(",") if p.strip()]
    return parse_scalar(text)


def as_list(v):
    if v is None:
        return []
    return list(v) if isinstance(v, (list, tuple)) else [v]


@dataclass
class ExperimentConfig:
    kind: str = "train"
    seed: int = 0
    out_dir: Path | None = None
    target: dict = field(default_factory=lambda: {"kind": "banana"})
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: dict = field(default_factory=dict)
    density: dict = field(default_factory=dict)
    cd1: dict = field(default_factory=dict)
    ae: AEConfig = field(default_factory=AEConfig)
    source: str | None = None

    def output_dir(self, override: str | os.PathLike | None = None) -> Path:
        if override is not None:
            return Path(override)
        if self.out_dir is not None:
            return Path(self.out_dir)
        return Path(os.environ.get(OUTPUT_ENV, "results")) / self.kind


def estimator_from_section(sec: dict) -> EstimatorConfig:
    kernel = KernelConfig(sec.get("kernel", "rbf"), sec.get("bandwidth"))
    return EstimatorConfig(
        kind=sec.get("objective", "mvl_langevin"),
        eps=float(sec.get("eps", 1e-3)),
        with_cv=bool(sec.get("with_cv", True)),
        alpha=float(sec.get("alpha", 1.0)),
        kernel=kernel,
        probes=int(sec.get("probes", 1)),
        fd_h=float(sec.get("fd_h", 1e-4)),
        sign=int(sec.get("sign", 1)),
    )


def train_from_section(sec: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        objective=estimator_from_section(sec),
        batch_size=int(sec.get("batch_size", 200)),
        learning_rate=float(sec.get("learning_rate", 4e-3)),
        iterations=int(sec.get("iterations", 400)),
        optimizer=str(sec.get("optimizer", "rmsprop")),
        seed=int(sec.get("seed", seed)),
        heldout_fraction=float(sec.get("heldout_fraction", 0.1)),
        early_stop_patience=int(sec.get("early_stop_patience", 0)),
        energy_l2_coefficient=float(sec.get("energy_l2_coefficient", 0.0)),
        eval_every=int(sec.get("eval_every", 50)),
        heldout_size=int(sec.get("heldout_size", 1000)),
    )


def ae_from_section(sec: dict, seed: int) -> AEConfig:
    keys = AEConfig.__dataclass_fields__
    kw = {}
    for k, v in sec.items():
        if k in ("objective", "eps", "with_cv"):
            continue
        if k not in keys:
            raise ConfigError(f"unknown [ae] key {k!r}")
        kw[k] = tuple(as_list(v)) if k.endswith("hidden") else v
    kw.setdefault("seed", seed)
    if "objective" in sec or "eps" in sec:
        kw["score_objective"] = EstimatorConfig(sec.get("objective", "mvl_riemannian"), float(sec.get("eps", 1e-3)), bool(sec.get("with_cv", True)))
    return AEConfig(**kw)


def _check_eps_grid(eps):
    if any(not (isinstance(e, (int, float)) and e > 0) for e in eps):
        raise ConfigError("epsilon values must be positive numbers")
    if list(eps) != sorted(eps):
        raise ConfigError("epsilon values must be sorted ascending")


def config_from_text(text: str, source: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case: the sweep section uses K and M
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    secs = {s: {k: parse_value(v) for k, v in cp[s].items()} for s in cp.sections()}
    exp = secs.get("experiment", {})
    kind = exp.get("kind", "train")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    seed = int(exp.get("seed", 0))
    try:
        cfg = ExperimentConfig(
            kind=kind,
            seed=seed,
            out_dir=Path(exp["out"]) if exp.get("out") else None,
            target=secs.get("target", {"kind": "banana"}),
            model=secs.get("model", {}),
            train=train_from_section(secs.get("train", {}), seed),
            sweep=secs.get("sweep", {}),
            density=secs.get("density", {}),
            cd1=secs.get("cd1", {}),
            ae=ae_from_section(secs.get("ae", {}), seed),
            source=source,
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    for sec in (cfg.sweep, cfg.cd1):
        if "eps" in sec:
            sec["eps"] = as_list(sec["eps"])
            _check_eps_grid(sec["eps"])
            sec["eps"] = [float(e) for e in sec["eps"]]
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return config_from_text(p.read_text(), str(p))
