"""Experiment configuration: one YAML document with dataset/model/train/eval sections."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from .cvae import LossWeights
from .data import DEFAULT_COLUMNS, SynthDomainSpec
from .dual_tt import ModelConfig
from .errors import ConfigError
from .trainer import MetaConfig


@dataclass
class DatasetConfig:
    dir: Optional[str] = None  # canonical dataset directory (ingest/synth output)
    paths: Dict[str, List[str]] = field(default_factory=dict)  # domain -> raw text files
    synth: List[dict] = field(default_factory=list)  # SynthDomainSpec dicts
    n_scenes: int = 20
    frames_per_scene: int = 40
    synth_seed: int = 0
    t_obs: int = 8
    t_pre: int = 20
    stride: int = 1
    frame_dt: float = 0.4
    columns: List[str] = field(default_factory=lambda: list(DEFAULT_COLUMNS))

    def synth_specs(self) -> List[SynthDomainSpec]:
        specs = [SynthDomainSpec.from_dict(s) for s in self.synth]
        for s in specs:
            s.validate()
        return specs

    def validate(self):
        if not 0 < self.t_obs < self.t_pre:
            raise ConfigError(f"dataset: need 0 < t_obs < t_pre, got {self.t_obs}, {self.t_pre}")
        if self.stride < 1:
            raise ConfigError("dataset: stride must be >= 1")
        sources = sum([self.dir is not None, bool(self.paths), bool(self.synth)])
        if sources > 1:
            raise ConfigError("dataset: give exactly one of dir, paths, synth")
        if self.synth:
            self.synth_specs()


@dataclass
class TrainSection:
    meta: MetaConfig = field(default_factory=MetaConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    batch_agent_budget: int = 512
    checkpoint_every: int = 0  # 0: final checkpoint only


@dataclass
class EvalSection:
    k: int = 20
    held_out: Optional[str] = None
    batch_agent_budget: int = 512


@dataclass
class ExperimentConfig:
    seed: int
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(raw or {})
        if raw.get("seed") is None:
            raise ConfigError("config: 'seed' is mandatory")
        unknown = set(raw) - {"seed", "dataset", "model", "train", "eval"}
        if unknown:
            raise ConfigError(f"config: unknown sections {sorted(unknown)}")
        try:
            ds = DatasetConfig(**raw.get("dataset", {}))
            model = ModelConfig.from_dict(raw.get("model", {}))
            tr = dict(raw.get("train", {}))
            loss = LossWeights(**tr.pop("loss", {}))
            budget = tr.pop("batch_agent_budget", 512)
            every = tr.pop("checkpoint_every", 0)
            meta = MetaConfig.from_dict(tr)
            ev = EvalSection(**raw.get("eval", {}))
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config: {exc}") from None
        cfg = cls(int(raw["seed"]), ds, model, TrainSection(meta, loss, int(budget), int(every)), ev)
        ds.validate()
        if ev.k < 1:
            raise ConfigError("eval: k must be >= 1")
        return cfg

    def to_dict(self) -> dict:
        meta = self.train.meta.to_dict()
        meta["loss"] = asdict(self.train.loss)
        meta["batch_agent_budget"] = self.train.batch_agent_budget
        meta["checkpoint_every"] = self.train.checkpoint_every
        return {
            "seed": self.seed,
            "dataset": asdict(self.dataset),
            "model": self.model.to_dict(),
            "train": meta,
            "eval": asdict(self.eval),
        }

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path, overrides: Sequence[str] = (), seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
