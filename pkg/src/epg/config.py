"""Run configuration: nested dataclasses with YAML round-tripping and a stable hash.

Defaults depend on the stage; a config file only lists overrides, and unknown
keys are rejected.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .nnet import NetworkConfig
from .schedules import DiffusionConfig
from .trajectory import AugmentConfig

STAGES = ("pretrain", "finetune-dm", "finetune-cm")


class ConfigError(ValueError):
    """Invalid or unknown configuration key."""


@dataclass
class DataConfig:
    path: str = "data/toy10"
    resolution: int = 32
    split: str | None = None


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    # when set, the effective lr is lr * batch_size / lr_base_batch
    lr_base_batch: int | None = None
    schedule: str = "constant"  # constant | cosine | step
    step_fracs: tuple[float, ...] = ()
    step_values: tuple[float, ...] = ()
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: float | None = None
    warmup_frac: float = 0.02

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("optim.betas must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine", "step"):
            raise ConfigError(f"optim.schedule: unknown schedule {self.schedule!r}")
        if self.schedule == "step" and len(self.step_values) != len(self.step_fracs) + 1:
            raise ConfigError("optim.step_values needs one more entry than optim.step_fracs")


@dataclass
class TrainConfig:
    batch_size: int = 128
    total_steps: int = 20_000
    # pre-training
    momentum_ema: float = 0.99
    n0: int = 20
    n1: int = 1280
    tau1: float = 0.1
    tau2: float = 0.2
    tau_contrastive: float = 0.2
    # fine-tuning
    online_ema: float = 0.9999
    dm_grid: int = 1280
    dm_lognormal: tuple[float, float] = (-1.2, 1.6)
    cm_lognormal: tuple[float, float] = (-0.4, 1.6)
    ratio_stages: int = 8
    tau_aux: float = 0.2
    w_aux: float = 1.0
    label_dropout: float = 0.1
    hflip: float = 0.5


@dataclass
class AblationConfig:
    no_consistency_term: bool = False
    no_aux_loss: bool = False
    from_scratch: bool = False
    fixed_tau: bool = False


@dataclass
class SamplerSettings:
    method: str = "heun"  # heun | euler | cm_onestep
    steps: int = 32
    cfg_scale: float = 1.0
    cfg_interval: tuple[float, float] = (0.19, 1.61)
    count: int = 64
    batch: int = 64

    def __post_init__(self):
        if self.method not in ("heun", "euler", "cm_onestep"):
            raise ConfigError(f"sampler.method: unknown sampler {self.method!r}")


@dataclass
class EvalConfig:
    every: int = 0
    count: int = 5000
    feature_checkpoint: str | None = None
    diag_every: int = 0
    diag_samples: int = 1000
    diag_probes: int = 8


@dataclass
class RunConfig:
    stage: str = "pretrain"
    seed: int = 0
    out_dir: str = "runs/default"
    init_checkpoint: str | None = None
    log_every: int = 50
    ckpt_every: int = 1000
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage: expected one of {STAGES}, got {self.stage!r}")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = copy.deepcopy(raw or {})
        stage = raw.get("stage", "pretrain")
        if stage not in STAGES:
            raise ConfigError(f"stage: expected one of {STAGES}, got {stage!r}")
        merged = _merge(stage_defaults(stage).to_dict(), raw, "")
        return _build(cls, merged, "")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        data = yaml.safe_load(text)
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_yaml(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict(_merge(self.to_dict(), changes, ""))


def config_hash(d: dict) -> str:
    """Hash of everything except ``out_dir``; independent of key order."""
    d = {k: v for k, v in d.items() if k != "out_dir"}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stage_defaults(stage: str) -> RunConfig:
    """Stage defaults carrying the reference hyper-parameters."""
    if stage == "pretrain":
        optim = OptimizerConfig(lr=6e-4, lr_base_batch=1024, schedule="cosine", betas=(0.9, 0.999),
                                weight_decay=0.03)
        return RunConfig(stage=stage, optim=optim, train=TrainConfig(total_steps=20_000))
    if stage == "finetune-dm":
        optim = OptimizerConfig(lr=1e-4, schedule="constant", betas=(0.9, 0.999), weight_decay=0.01,
                                grad_clip=0.5)
        return RunConfig(stage=stage, optim=optim, train=TrainConfig(total_steps=30_000))
    if stage == "finetune-cm":
        # 400k / 500k of 600k steps
        optim = OptimizerConfig(lr=1e-4, schedule="step", step_fracs=(2 / 3, 5 / 6),
                                step_values=(1e-4, 3e-5, 8e-6), betas=(0.9, 0.99), weight_decay=0.01,
                                grad_clip=None)
        return RunConfig(stage=stage, optim=optim, network=NetworkConfig(dec_dropout=0.5),
                         train=TrainConfig(total_steps=30_000),
                         sampler=SamplerSettings(method="cm_onestep", steps=1))
    raise ConfigError(f"unknown stage {stage!r}")


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _merge(base: dict, over: dict, prefix: str) -> dict:
    out = dict(base)
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def _build(cls, d: dict, prefix: str):
    proto = cls()
    kwargs = {}
    for k, v in d.items():
        if not hasattr(proto, k):
            raise ConfigError(f"unknown config key {prefix + k!r}")
        default = getattr(proto, k)
        if dataclasses.is_dataclass(default):
            kwargs[k] = _build(type(default), v, f"{prefix}{k}.")
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc
