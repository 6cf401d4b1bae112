"""Run configuration: one strict JSON document per experiment.

Parsing is strict on purpose: a key the schema does not know is an error
naming the offending field, so a typo like "hieght" fails loudly instead
of silently training with a default.
"""

from __future__ import annotations

import dataclasses
import json

from . import data as dlib
from .model import EncoderConfig, LayerPlan, config_from_dict, config_to_dict
from .tensor import ShapeError


@dataclasses.dataclass
class TrainSettings:
    batch_size: int = 8
    steps: int = 3000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 100
    clip: float = 0.0
    log_every: int = 50
    mask_rate: float = 0.15

    def validate(self):
        if self.batch_size < 1 or self.steps < 1:
            raise ShapeError("config: train.batch_size and train.steps must be >= 1")
        if self.lr <= 0 or self.log_every < 1:
            raise ShapeError("config: train.lr must be positive, train.log_every >= 1")
        return self


@dataclasses.dataclass
class BootstrapSettings:
    """Inputs of the staged widening/deepening plan; budget is total steps."""

    w: int = 1
    h_s: int = 0
    h_f: int = 3
    budget: int = 3000
    variant: str = "tf"
    tau: float = 1.0
    branching: list | None = None


@dataclasses.dataclass
class BenchSettings:
    variants: list = dataclasses.field(default_factory=lambda: ["full", "tf"])
    ns: list = dataclasses.field(default_factory=lambda: [1024, 2048, 4096, 8192])
    d: int = 64
    heads: int = 8
    h: int = 6
    repetitions: int = 10
    seed: int = 0


@dataclasses.dataclass
class RunConfig:
    task: str = "masked-copy"
    seed: int = 0
    model: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    train: TrainSettings = dataclasses.field(default_factory=TrainSettings)
    bootstrap: BootstrapSettings | None = None
    bench: BenchSettings | None = None

    def validate(self):
        if self.task not in dlib.TASKS:
            raise ShapeError(f"config: unknown task {self.task!r}, expected one of {dlib.TASKS}")
        self.model.validate()
        self.train.validate()
        return self


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(cls, d, path):
    if not isinstance(d, dict):
        raise ShapeError(f"config: {path or 'document'} must be an object, got {type(d).__name__}")
    extra = sorted(set(d) - _fields(cls))
    if extra:
        where = f"{path}.{extra[0]}" if path else extra[0]
        raise ShapeError(f"config: unknown field {where}")
    return d


def run_config_from_dict(d):
    _reject_unknown(RunConfig, d, "")
    kw = {k: d[k] for k in ("task", "seed") if k in d}
    if "model" in d:
        md = _reject_unknown(EncoderConfig, d["model"], "model")
        for i, p in enumerate(md.get("layers", [])):
            _reject_unknown(LayerPlan, p, f"model.layers[{i}]")
        kw["model"] = config_from_dict(md)
    if "train" in d:
        kw["train"] = TrainSettings(**_reject_unknown(TrainSettings, d["train"], "train"))
    if d.get("bootstrap") is not None:
        kw["bootstrap"] = BootstrapSettings(
            **_reject_unknown(BootstrapSettings, d["bootstrap"], "bootstrap"))
    if d.get("bench") is not None:
        kw["bench"] = BenchSettings(**_reject_unknown(BenchSettings, d["bench"], "bench"))
    return RunConfig(**kw).validate()


def run_config_to_dict(cfg):
    return {
        "task": cfg.task,
        "seed": cfg.seed,
        "model": config_to_dict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "bootstrap": None if cfg.bootstrap is None else dataclasses.asdict(cfg.bootstrap),
        "bench": None if cfg.bench is None else dataclasses.asdict(cfg.bench),
    }


def load_run_config(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ShapeError(f"config: {path} is not valid JSON: {e}") from e
    return run_config_from_dict(doc)


def save_run_config(path, cfg):
    with open(path, "w") as fh:
        json.dump(run_config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
