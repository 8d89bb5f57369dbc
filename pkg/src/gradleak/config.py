"""Experiment configuration: one JSON document drives every pipeline stage.

The master seed is the only source of randomness; per-stage seeds are derived
from it with fixed offsets so stages can rerun independently yet always agree.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .federation import DpConfig
from .reconstruction import IrMatchConfig
from .training import PgdBudget, SpabTrainConfig


class ConfigError(ValueError):
    pass


# fixed per-stage seed offsets; stable across runs and stage orderings
STAGE_OFFSETS = {
    "data": 0,
    "pretrain": 1,
    "spab": 2,
    "round": 3,
    "reconstruct": 4,
    "preimage": 5,
    "detect": 6,
    "evaluate": 7,
}


@dataclass
class DatasetConfig:
    family: str = "geometric"
    classes: int = 4
    count: int = 512
    size: int = 16


@dataclass
class ModelConfig:
    ir_dim: int = 128
    in_channels: int = 3


@dataclass
class PretrainConfig:
    epochs: int = 12
    lr: float = 0.05
    batch_size: int = 32
    epsilon: float = 4.0 / 255.0
    step_size: float = 1.0 / 255.0
    steps: int = 5

    def budget(self) -> PgdBudget:
        # a zero-radius budget encodes natural training
        return PgdBudget(self.epsilon, max(self.step_size, 1e-12), max(self.steps, 1))


@dataclass
class RoundConfig:
    batch_size: int = 8
    dp_epsilon: float = 0.0  # 0 disables the mechanism
    dp_delta: float = 1e-5
    dp_clip: float = 0.0  # 0 means "calibrate to the median clean norm"


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    spab: SpabTrainConfig = field(default_factory=SpabTrainConfig)
    round: RoundConfig = field(default_factory=RoundConfig)
    ir_match: IrMatchConfig = field(default_factory=IrMatchConfig)
    out_dir: str = "runs/demo"
    master_seed: int = 0

    def stage_seed(self, stage: str) -> int:
        if stage not in STAGE_OFFSETS:
            raise ConfigError(f"unknown stage {stage!r}")
        return (self.master_seed * 1000003 + STAGE_OFFSETS[stage]) % (2 ** 63)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be an object")
        kwargs = {}
        sections = {
            "dataset": DatasetConfig,
            "model": ModelConfig,
            "pretrain": PretrainConfig,
            "spab": SpabTrainConfig,
            "round": RoundConfig,
            "ir_match": IrMatchConfig,
        }
        for key, value in doc.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                known = {f.name for f in dataclasses.fields(sections[key])}
                bad = set(value) - known
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                kwargs[key] = sections[key](**value)
            elif key in ("out_dir", "master_seed"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)

    def content_hash(self) -> str:
        """Hash of everything except the output directory; stages use it to
        detect already-completed work."""
        doc = dataclasses.asdict(self)
        doc.pop("out_dir")
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentConfig.from_json(fh.read())


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json() + "\n")
