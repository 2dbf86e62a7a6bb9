"""INI-style run configuration: ``[backbone]``, ``[prn]``, ``[train]`` and ``[mining]``.

Values are Python literals (``0.1``, ``(32, 32)``, ``"C"``); bare words are
read as strings. Unknown sections and keys are errors.
"""
from __future__ import annotations

import ast
import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..backbone import PRESETS, BackboneConfig
from ..errors import InvalidConfig
from ..losses import STRATEGIES
from ..model import ModelConfig
from ..prn import RelationConfig


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    dtype: str = "float32"
    reduction: str = "mean"
    samples_per_id: int = 4      # K of the P x K batches used when triplet terms are on
    eval_every: int = 1
    # per-stage override of ``epochs``; the relation stage is the slow one
    stage_epochs: dict = field(default_factory=lambda: {"prn": 10})

    def __post_init__(self):
        object.__setattr__(self, "stage_epochs", dict(self.stage_epochs))
        for stage, n in self.stage_epochs.items():
            if stage not in ("backbone", "encoder", "prn", "fusion") or int(n) < 0:
                raise InvalidConfig(f"bad stage_epochs entry {stage!r}: {n!r}")
        if self.learning_rate < 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.batch_size < 2 or self.epochs < 0 or self.samples_per_id < 2:
            raise InvalidConfig("batch_size >= 2, epochs >= 0 and samples_per_id >= 2 required")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfig(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.reduction not in ("sum", "mean"):
            raise InvalidConfig(f"reduction must be sum or mean, got {self.reduction!r}")

    def epochs_for(self, stage: str) -> int:
        return int(self.stage_epochs.get(stage, self.epochs))


@dataclass(frozen=True)
class MiningConfig:
    strategy: str = "random-k"
    seed: int = 0
    k: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidConfig(f"mining strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.k < 1:
            raise InvalidConfig("mining k must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)

    def to_text(self) -> str:
        b, r = self.model.backbone, self.model.relation
        sections = {
            "backbone": {f.name: getattr(b, f.name) for f in fields(b)},
            "prn": {**{f.name: getattr(r, f.name) for f in fields(r)}, "region_fmap": self.model.region_fmap},
            "train": {f.name: getattr(self.train, f.name) for f in fields(self.train)},
            "mining": {f.name: getattr(self.mining, f.name) for f in fields(self.mining)},
        }
        lines = []
        for name, values in sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v!r}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)


_KEYS = {
    "backbone": {f.name for f in fields(BackboneConfig)} | {"preset"},
    "prn": {f.name for f in fields(RelationConfig)} | {"region_fmap"},
    "train": {f.name for f in fields(TrainConfig)},
    "mining": {f.name for f in fields(MiningConfig)},
}


def _value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfig(str(exc)) from exc
    raw: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _KEYS:
            raise InvalidConfig(f"unknown section [{section}]")
        unknown = set(parser[section]) - _KEYS[section]
        if unknown:
            raise InvalidConfig(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
        raw[section] = {k: _value(v) for k, v in parser[section].items()}
    try:
        bb = dict(raw.get("backbone", {}))
        preset = bb.pop("preset", None)
        if preset is not None and preset not in PRESETS:
            raise InvalidConfig(f"unknown backbone preset {preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[preset] if preset else BackboneConfig()
        if "stages" in bb:
            bb["stages"] = tuple(tuple(s) for s in bb["stages"])
        backbone = replace(base, **bb)
        rel = dict(raw.get("prn", {}))
        region_fmap = int(rel.pop("region_fmap", 1))
        relation = RelationConfig(**rel)
        model = ModelConfig(backbone, relation, region_fmap)
        return RunConfig(model, TrainConfig(**raw.get("train", {})), MiningConfig(**raw.get("mining", {})))
    except InvalidConfig:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file {path} does not exist")
    return parse_config(path.read_text())
