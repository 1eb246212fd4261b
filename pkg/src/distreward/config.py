"""Experiment configuration: dataclass sections loaded from a TOML file.

Sections: [task], [model], [reward], [loss], [train], [eval]. Unknown
sections or keys are rejected with the full list of offending names.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import tomli

from .errors import InvalidInput
from .losses import LossConfig


class ConfigError(InvalidInput):
    pass


@dataclass
class TaskConfig:
    preset: str = "default"
    frame_len: int = 8
    embed_features: int = 6
    encoder_seed: int = 1234


@dataclass
class ModelConfig:
    width: int = 64
    init_seed: int = 0
    pretrain_steps: int = 3000
    pretrain_lr: float = 3e-3
    pretrain_seed: int = 0
    checkpoint: str = ""  # load the pretrained baseline from here instead of pretraining


@dataclass
class RewardConfig:
    metric: str = "preference"  # preference | cosine | per_item_fad | dataset_fad | vendi | mixed
    target_shift: list = field(default_factory=lambda: [0.0, 0.0])
    reference_size: int = 2000
    reference_seed: int = 7
    modality: str = "audio-like"  # audio-like | text-like
    reference_path: str = ""  # optional embedding file replacing the synthetic reference set
    bandwidth: float = 0.0  # preference head; 0 selects the median heuristic
    preference_size: int = 400
    preference_raters: int = 20
    label_norm: str = "global"  # global | gibbs
    mix: list = field(default_factory=lambda: ["preference", "vendi"])
    p: float = 0.5


@dataclass
class TrainConfig:
    iterations: int = 200
    batch_size: int = 80
    demo_steps: int = 40
    ref_mix: float = 0.1
    ref_mix_per_item: bool = False
    lr: float = 1e-3
    beta1: float = 0.0
    clip: float = 10.0
    cond_dropout: bool = True
    dropout_prob: float = 0.1
    threshold: str = "mean"  # unpaired split threshold: mean | median
    shards: int = 1
    seed: int = 0
    checkpoint_every: int = 50
    eval_every: int = 50


@dataclass
class EvalConfig:
    n_prompts: int = 256
    steps: int = 40
    n_boot: int = 1000
    subset: int = 40
    seed: int = 0
    prompts_file: str = ""
    hook_prompts: int = 64


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        t = self.train
        if t.iterations < 0:
            raise ConfigError("train.iterations must be >= 0")
        if t.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        paired = self.loss.variant != "kto_unpaired"
        if paired and t.batch_size % 2:
            raise ConfigError("train.batch_size must be even for paired losses")
        for name in ("ref_mix", "dropout_prob"):
            if not 0.0 <= getattr(t, name) <= 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1]")
        if not 0.0 <= self.reward.p <= 1.0:
            raise ConfigError("reward.p must lie in [0, 1]")
        if t.threshold not in ("mean", "median"):
            raise ConfigError("train.threshold must be 'mean' or 'median'")
        if t.shards < 1:
            raise ConfigError("train.shards must be >= 1")
        if self.reward.label_norm not in ("global", "gibbs"):
            raise ConfigError("reward.label_norm must be 'global' or 'gibbs'")
        if self.reward.modality not in ("audio-like", "text-like"):
            raise ConfigError("reward.modality must be 'audio-like' or 'text-like'")


SECTIONS = {
    "task": TaskConfig, "model": ModelConfig, "reward": RewardConfig,
    "loss": LossConfig, "train": TrainConfig, "eval": EvalConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    unknown = [f"[{s}]" for s in data if s not in SECTIONS]
    sections = {}
    for name, cls in SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        allowed = {f.name for f in fields(cls)}
        unknown += [f"{name}.{k}" for k in raw if k not in allowed]
        sections[name] = raw
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    try:
        cfg = ExperimentConfig(**{name: SECTIONS[name](**raw) for name, raw in sections.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            data = tomli.load(f)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
