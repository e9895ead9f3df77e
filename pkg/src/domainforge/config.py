"""Pipeline configuration: one JSON document governing every stage.

Schema (all sections optional)::

    {
      "seed": 0,
      "paths":    {"work_dir": "run", ...},
      "clean":    {"workers": 1, "dedup": true, "threshold": 0.9, "num_perm": 64},
      "mix":      {"book": 15, "paper": 4, "general": 1},
      "pack":     {"context_len": 2048},
      "model":    {ModelConfig fields},
      "inject":   {TrainConfig fields},
      "instruct": {TrainConfig fields},
      "build":    {"variants": 1, "provider": "fixture", "rationale_style": "general"},
      "eval":     {EvalConfig fields}
    }

The global ``seed`` is copied into every sub-config that does not set its own.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

from .evaluate import EvalConfig
from .mixer import MixRatio
from .model import ModelConfig
from .train import TrainConfig

SECTIONS = ("paths", "clean", "mix", "pack", "model", "inject", "instruct", "build", "eval")


class ConfigError(ValueError):
    pass


def _pick(cls, obj: dict, section: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {unknown}")
    return dict(obj)


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: dict = field(default_factory=dict)
    clean: dict = field(default_factory=lambda: {"workers": 1, "dedup": True, "threshold": 0.9, "num_perm": 64})
    mix: dict = field(default_factory=lambda: {"book": 15, "paper": 4, "general": 1})
    pack: dict = field(default_factory=lambda: {"context_len": 2048})
    model: dict = field(default_factory=dict)
    inject: dict = field(default_factory=dict)
    instruct: dict = field(default_factory=dict)
    build: dict = field(default_factory=lambda: {"variants": 1, "provider": "fixture", "rationale_style": "general"})
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        unknown = sorted(set(obj) - {"seed", *SECTIONS})
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        cfg = cls()
        cfg.seed = int(obj.get("seed", 0))
        for name in SECTIONS:
            if name in obj:
                if not isinstance(obj[name], dict):
                    raise ConfigError(f"section '{name}' must be an object")
                getattr(cfg, name).update(obj[name])
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "PipelineConfig":
        if path is None:
            return cls()
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def to_json(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = dict(getattr(self, name))
        return out

    # Typed views, validated on access.

    def mix_ratio(self) -> MixRatio:
        return MixRatio(**_pick(MixRatio, self.mix, "mix"))

    def model_config(self) -> ModelConfig:
        obj = _pick(ModelConfig, self.model, "model")
        obj.setdefault("seed", self.seed)
        return ModelConfig(**obj)

    def train_config(self, stage: str) -> TrainConfig:
        obj = _pick(TrainConfig, getattr(self, stage), stage)
        obj["stage"] = stage
        obj.setdefault("seed", self.seed)
        return TrainConfig.from_json(obj)

    def eval_config(self) -> EvalConfig:
        obj = _pick(EvalConfig, self.eval, "eval")
        obj.setdefault("seed", self.seed)
        return EvalConfig(**obj)

    def validate(self) -> None:
        self.mix_ratio()
        self.model_config()
        self.train_config("inject")
        self.train_config("instruct")
        self.eval_config()
