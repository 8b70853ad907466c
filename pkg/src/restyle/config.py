"""Experiment configuration: nested dataclasses loaded from YAML or JSON, with a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .data import DatasetSpec
from .errors import ConfigurationError
from .schemes import MAX_INFER_STEPS, TrainConfig

SCHEMES = ("restyle", "single_pass", "naive", "optimization", "hybrid", "fpn", "bootstrap")


@dataclass
class GeneratorSpec:
    seed: int = 1
    k: int = 8
    d: int = 64
    resolution: int = 32
    channels: list = field(default_factory=lambda: [32, 32, 32, 32])
    avg_samples: int = 10_000


@dataclass
class EncoderSpec:
    variant: str = "simple"
    seed: int = 0


@dataclass
class EvalSpec:
    n_images: int = 64          # test images for encoder schemes
    infer_steps: int = MAX_INFER_STEPS
    n_opt_images: int = 32      # test images for the optimisation and hybrid curves
    opt_iters: int = 1500
    hybrid_iters: int = 500
    opt_lr: float = 0.05
    record_every: int = 10
    timing_repeats: int = 20


@dataclass
class BaselineSpec:
    # "iterations": single-pass training sees as many batches as the N-step run;
    # "updates": it gets as many optimizer updates (N times the batches)
    single_pass_budget: str = "iterations"
    naive_iterations: int = 250
    fpn_iterations: int | None = None  # None: same as the main run


@dataclass
class BootstrapSpec:
    transform: str = "posterize"
    finetune_steps: int = 300
    finetune_seed: int = 5
    train_iterations: int = 150
    n_images: int = 64
    n_steps: int = 5
    probe_samples: int = 64


@dataclass
class ExperimentConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    baselines: BaselineSpec = field(default_factory=BaselineSpec)
    bootstrap: BootstrapSpec = field(default_factory=BootstrapSpec)
    schemes: list = field(default_factory=lambda: list(SCHEMES))
    metric_seed: int = 0
    out_dir: str = "runs/default"

    def validate(self):
        self.train.validate()
        self.data.validate()
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown:
            raise ConfigurationError(f"unknown schemes {sorted(unknown)}; expected a subset of {SCHEMES}")
        if self.encoder.variant not in ("simple", "fpn"):
            raise ConfigurationError(f"encoder variant must be simple or fpn, got {self.encoder.variant!r}")
        if self.baselines.single_pass_budget not in ("iterations", "updates"):
            raise ConfigurationError("baselines.single_pass_budget must be 'iterations' or 'updates'")
        ev = self.evaluation
        if not 1 <= ev.infer_steps <= MAX_INFER_STEPS:
            raise ConfigurationError(f"infer_steps must be in [1, {MAX_INFER_STEPS}]")
        if ev.n_images < 1 or ev.n_opt_images < 0 or ev.opt_iters < 0 or ev.hybrid_iters < 0:
            raise ConfigurationError("evaluation sizes must be non-negative (n_images >= 1)")
        if ev.record_every < 1:
            raise ConfigurationError("record_every must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        """sha256 over the canonical JSON form, excluding the output directory."""
        d = self.to_dict()
        d.pop("out_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def seeds(self):
        return {"generator": self.generator.seed, "data": self.data.seed, "encoder": self.encoder.seed,
                "train": self.train.seed, "metric": self.metric_seed,
                "finetune": self.bootstrap.finetune_seed}


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config section {path or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown config keys in {path or '<root>'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def config_from_dict(raw):
    return _build(ExperimentConfig, raw or {}, "").validate()


def load_config(path):
    """Load a YAML (or JSON) experiment config; a missing or malformed file is a configuration error."""
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file {p} does not exist")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"could not parse {p}: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
