"""Scenario configuration: schema, strict loading, and stable hashing.

A scenario config is one structured YAML/JSON file. Unknown keys anywhere in
the tree are a hard error so that config drift never silently changes runs;
the config hash is computed over the canonical (sorted-key) encoding and is
therefore stable under key reordering.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import attack_from_dict
from .errors import ConfigError
from .utils import stable_hash


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    cosine_decay: bool = True


@dataclass
class TrainingConfig:
    target_epochs: int = 30
    stage0_epochs: int = 40
    finetune_epochs: int = 4
    estimator_epochs: int = 10
    target_augment: bool = False
    stage0_augment: bool = False
    target: OptimConfig = field(default_factory=OptimConfig)
    stage0: OptimConfig = field(default_factory=OptimConfig)
    finetune: OptimConfig = field(default_factory=lambda: OptimConfig(lr=0.05, batch_size=64))
    estimator: OptimConfig = field(default_factory=lambda: OptimConfig(lr=0.02))


@dataclass
class LossConfig:
    gamma: float = 0.01
    lam: float = 0.5
    mixup_alpha: float = 2.0
    mixup_beta: float = 2.0
    proto_noise_sigma: float = 0.0


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = (32, 64, 128, 128)
    embedding_dim: int = 128
    split_index: int = 3
    norm: str = "group"
    gn_groups: int = 8
    bias: bool = True
    classifier_scale: float = 16.0
    estimator_channels: tuple[int, ...] = (16, 32, 64, 64)


@dataclass
class EnsembleConfig:
    space: str = "logit"  # logit | prob
    calibrate: bool = True


@dataclass
class FilterConfig:
    use_ensemble: bool = True
    min_survivors: int = 1


@dataclass
class FinetuneConfig:
    old_columns: bool = False


@dataclass
class ExpandConfig:
    per_attack: bool = False
    init_from_virtual: bool = True


@dataclass
class AblationConfig:
    disable_l0: bool = False
    disable_lproto: bool = False
    disable_fp: bool = False


@dataclass
class EvalConfig:
    unseen_attacks: list = field(default_factory=list)
    use_ensemble: bool = True
    batch_size: int = 512


@dataclass
class DataConfig:
    source: dict = field(default_factory=lambda: {"kind": "synthetic"})
    root: str | None = None


@dataclass
class ScenarioConfig:
    """Everything one scenario run depends on, seeds included."""

    num_classes: int = 10
    budget_per_class: int = 10
    stages: int = 4
    attacks: list = field(default_factory=list)
    self_perturb_eps: float = 8 / 255
    seed: int = 0
    out_dir: str = "runs/scenario"
    data: DataConfig = field(default_factory=DataConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    expand: ExpandConfig = field(default_factory=ExpandConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_TUPLE_FIELDS = {"channels", "estimator_channels"}


def _from_dict(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(payload).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        if name in _TUPLE_FIELDS:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    "data": DataConfig,
    "model": BackboneConfig,
    "training": TrainingConfig,
    "loss": LossConfig,
    "ensemble": EnsembleConfig,
    "filter": FilterConfig,
    "finetune": FinetuneConfig,
    "expand": ExpandConfig,
    "ablation": AblationConfig,
    "eval": EvalConfig,
}
_TRAINING_NESTED = {"target", "stage0", "finetune", "estimator"}


def config_from_dict(payload: dict) -> ScenarioConfig:
    """Build and validate a ScenarioConfig from a plain mapping."""
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a mapping")
    fields = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(payload) - fields
    if unknown:
        raise ConfigError(f"unknown config key(s) at top level: {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        if name in _NESTED:
            if name == "training":
                kwargs[name] = _training_from_dict(value)
            else:
                kwargs[name] = _from_dict(_NESTED[name], value, name)
        else:
            kwargs[name] = value
    config = ScenarioConfig(**kwargs)
    validate_config(config)
    return config


def _training_from_dict(payload: dict) -> TrainingConfig:
    if not isinstance(payload, dict):
        raise ConfigError("training: expected a mapping")
    fields = {f.name for f in dataclasses.fields(TrainingConfig)}
    unknown = set(payload) - fields
    if unknown:
        raise ConfigError(f"unknown config key(s) at training: {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        if name in _TRAINING_NESTED:
            kwargs[name] = _from_dict(OptimConfig, value, f"training.{name}")
        else:
            kwargs[name] = value
    return TrainingConfig(**kwargs)


def validate_config(config: ScenarioConfig) -> None:
    """Range and consistency checks; attack specs are resolved to surface
    unknown or reserved attack names immediately."""
    if config.num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if config.budget_per_class < 0:
        raise ConfigError("budget_per_class must be >= 0")
    if config.stages < 0:
        raise ConfigError("stages must be >= 0")
    if len(config.attacks) != config.stages + 1:
        raise ConfigError(
            f"attack sequence length {len(config.attacks)} != stages+1 = {config.stages + 1}"
        )
    if config.loss.gamma < 0 or config.loss.lam < 0 or config.loss.proto_noise_sigma < 0:
        raise ConfigError("loss trade-offs must be >= 0")
    if config.loss.mixup_alpha <= 0 or config.loss.mixup_beta <= 0:
        raise ConfigError("mixup Beta parameters must be > 0")
    if config.model.classifier_scale <= 0:
        raise ConfigError("classifier_scale must be > 0")
    if config.ensemble.space not in ("logit", "prob"):
        raise ConfigError(f"ensemble.space must be logit|prob, got {config.ensemble.space!r}")
    for key in ("target_epochs", "stage0_epochs", "finetune_epochs", "estimator_epochs"):
        if getattr(config.training, key) < 0:
            raise ConfigError(f"training.{key} must be >= 0")
    if config.self_perturb_eps < 0:
        raise ConfigError("self_perturb_eps must be >= 0")
    for entry in list(config.attacks) + list(config.eval.unseen_attacks):
        for spec_dict in entry if isinstance(entry, list) else [entry]:
            attack_from_dict(spec_dict)  # raises on unknown/reserved names
    first = config.attacks[0]
    if isinstance(first, list) and len(first) != 1:
        raise ConfigError("stage 0 takes exactly one initial attack")


def stage_attack_specs(config: ScenarioConfig, stage: int) -> list:
    """Attack spec dicts scheduled for one stage (always a list)."""
    entry = config.attacks[stage]
    return list(entry) if isinstance(entry, list) else [entry]


def config_to_dict(config: ScenarioConfig) -> dict:
    out = dataclasses.asdict(config)
    out["model"]["channels"] = list(config.model.channels)
    out["model"]["estimator_channels"] = list(config.model.estimator_channels)
    return out


def config_hash(config: ScenarioConfig) -> str:
    return stable_hash(config_to_dict(config))


def load_config(path: str | Path, overrides: dict | None = None) -> ScenarioConfig:
    """Load a scenario config file (YAML or JSON) with strict key checking."""
    raw = Path(path).read_text()
    payload = yaml.safe_load(raw)
    if payload is None:
        payload = {}
    if overrides:
        payload.update(overrides)
    return config_from_dict(payload)


def save_config(config: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True))
