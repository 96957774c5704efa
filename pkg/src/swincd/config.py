"""Run configuration: YAML schema, defaults, and environment overrides.

Schema (all keys optional unless noted)::

    seed: 0
    data_root: data/synth        # required for train/eval
    out_dir: runs/default
    model:
      scale: desk                # desk | paper preset
      mfp_enabled: true
      branch_mode: self-supervised   # unsupervised | supervised | self-supervised
      depths: [2, 2, 2, 2, 2, 2, 2]
      window: 4                  # any other ModelConfig field may appear here
    loss:
      dice_weight: 0.5
      branch_weight: 0.25
      dice_smooth: 1.0
      clamp_eps: 1.0e-7
    train:
      lr: 5.0e-5                 # initial learning rate
      lr_policy: linear          # linear (decays to 0 over epochs) | constant
      epochs: 200
      batch_size: 4
      beta1: 0.9
      beta2: 0.999
      threshold: 0.5             # eval binarization threshold
      workers: 0                 # parallel data-loading workers
      augment_ops: [0, 1, 2, 3, 4, 5, 6, 7]   # dihedral ops for train split

Environment overrides: ``SWINCD_OUT_DIR`` replaces ``out_dir`` and
``SWINCD_SEED`` replaces ``seed``.
"""

import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .data import N_DIHEDRAL_OPS
from .errors import ConfigurationError
from .losses import LossConfig
from .network import ModelConfig

ENV_OUT_DIR = "SWINCD_OUT_DIR"
ENV_SEED = "SWINCD_SEED"

_SCALE_PRESETS = {"desk": ModelConfig.desk, "paper": ModelConfig.paper}


@dataclass
class RunConfig:
    """Everything a training or evaluation run depends on."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 5e-5
    lr_policy: str = "linear"
    epochs: int = 200
    batch_size: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    threshold: float = 0.5
    seed: int = 0
    workers: int = 0
    augment_ops: Tuple[int, ...] = tuple(range(N_DIHEDRAL_OPS))
    data_root: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.augment_ops = tuple(self.augment_ops)
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(
                f"threshold must lie in (0, 1), got {self.threshold}"
            )
        if self.lr_policy not in ("linear", "constant"):
            raise ConfigurationError(
                f"lr_policy must be linear or constant, got {self.lr_policy!r}"
            )
        if any(not 0 <= op < N_DIHEDRAL_OPS for op in self.augment_ops):
            raise ConfigurationError(
                f"augment_ops must be within [0, {N_DIHEDRAL_OPS}), "
                f"got {self.augment_ops}"
            )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["model"] = self.model.to_dict()
        data["loss"] = asdict(self.loss)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        model = data.pop("model", {})
        if isinstance(model, dict):
            model = _model_from_mapping(model)
        loss = data.pop("loss", {})
        if isinstance(loss, dict):
            loss = LossConfig(**loss)
        return cls(model=model, loss=loss, **data)


def _model_from_mapping(mapping: dict) -> ModelConfig:
    mapping = dict(mapping)
    scale = mapping.pop("scale", "desk")
    if scale not in _SCALE_PRESETS:
        raise ConfigurationError(
            f"model scale must be one of {sorted(_SCALE_PRESETS)}, got {scale!r}"
        )
    try:
        return _SCALE_PRESETS[scale](**mapping)
    except TypeError as exc:
        raise ConfigurationError(f"bad model config field: {exc}")


def load_run_config(path, env: Optional[dict] = None) -> RunConfig:
    """Parse a YAML run config and apply environment overrides."""
    env = os.environ if env is None else env
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config {path} must be a mapping")

    train = raw.pop("train", {}) or {}
    if not isinstance(train, dict):
        raise ConfigurationError("'train' section must be a mapping")
    known_train = {"lr", "lr_policy", "epochs", "batch_size", "beta1", "beta2",
                   "threshold", "workers", "augment_ops"}
    unknown = set(train) - known_train
    if unknown:
        raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
    raw.update(train)

    known_top = {"model", "loss", "seed", "data_root", "out_dir"} | known_train
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")

    if ENV_OUT_DIR in env:
        raw["out_dir"] = env[ENV_OUT_DIR]
    if ENV_SEED in env:
        try:
            raw["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigurationError(
                f"{ENV_SEED} must be an integer, got {env[ENV_SEED]!r}"
            )
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigurationError(f"bad config field: {exc}")
