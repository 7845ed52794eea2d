"""Experiment configuration: nested dataclasses with YAML round-tripping.

Every field has a default; unknown keys in a config file are hard errors so
typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class DataConfig:
    n_patients: int = 1000
    malignant_fraction: float = 0.3
    image_size: int = 64
    split_ratios: tuple[float, float, float] = (0.64, 0.16, 0.20)


@dataclass
class VaeConfig:
    latent_channels: int = 4
    channels: tuple[int, ...] = (32, 64, 128)
    lr: float = 5e-5
    batch_size: int = 64
    epochs: int = 40
    lambda_kl: float = 1e-6
    lambda_lpips: float = 0.5
    lambda_align: float = 0.1
    lambda_pred: float = 0.05
    sigma_f: float | None = None  # None -> median-distance heuristic
    sigma_z: float | None = None
    grad_clip: float = 1.0
    rotation_augment: bool = True


@dataclass
class ScheduleConfig:
    t_steps: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2


@dataclass
class DenoiserConfig:
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4)
    n_heads: int = 4
    ctx_dim: int = 128


@dataclass
class PromptConfig:
    m_sets: int = 4
    n_vectors: int = 8


@dataclass
class UncondConfig:
    batch_size: int = 16
    epochs: int = 30
    warmup_steps: int = 200
    start_lr: float = 1e-6
    peak_lr: float = 1e-4
    floor_lr: float = 1e-5
    grad_clip: float = 1.0


@dataclass
class CondConfig:
    batch_size: int = 8
    epochs: int = 40
    lr: float = 2e-5
    p_drop: float = 0.1
    grad_clip: float = 1.0


@dataclass
class ClassifierConfig:
    channels: tuple[int, ...] = (16, 32, 64, 96)
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    rotation_augment: bool = True


@dataclass
class EvalConfig:
    k_runs: int = 20
    ddim_steps: int = 50
    correct_error: float = 0.3
    correct_var: float = 0.01
    unsure_var: float = 0.05
    incorrect_error: float = 0.5


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    uncond: UncondConfig = field(default_factory=UncondConfig)
    cond: CondConfig = field(default_factory=CondConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    master_seed: int = 23
    out_dir: str = "runs/experiment"


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValueError(f"config section {path or '<root>'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(
            f"unknown config key(s) {sorted(unknown)} in section {path or '<root>'}"
        )
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.default_factory, type) and dataclasses.is_dataclass(f.default_factory)
        ):
            kwargs[name] = _build(f.default_factory, value, f"{path}.{name}".lstrip("."))
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def convert(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        return obj

    return convert(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
