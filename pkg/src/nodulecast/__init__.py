"""nodulecast: synthetic longitudinal nodule benchmark with attribute-aligned
latent diffusion for follow-up image prediction."""

from .classifier import MalignancyClassifier
from .config import ExperimentConfig, load_config
from .conditioning import (
    ContextEmbedding,
    SoftPromptBank,
    TextBackbone,
    Vocabulary,
    embed_context,
    null_context,
)
from .diffusion import FollowupGenerator, ddim_sample, train_conditional, train_unconditional
from .ehr import EhrRecord, parse_report, render_report
from .evaluation import MetricsReport, RunTrace, k_run_evaluate, variance_analysis
from .features import FeatureEncoder
from .losses import (
    AlignmentConfig,
    alignment_loss,
    gaussian_kl,
    perceptual_loss,
    predictive_loss,
    total_vae_loss,
)
from .metrics import auprc, auroc, fid, perceptual_distance, spearman
from .pipeline import ExperimentPaths, run_ablation, run_all, run_stage
from .schedule import NoiseSchedule, ddim_timesteps, forward_diffuse
from .synthetic import NoduleRecord, generate_dataset, split_dataset
from .vae import LatentCode, NoduleVae

__version__ = "0.1.0"

__all__ = [
    "AlignmentConfig",
    "ContextEmbedding",
    "EhrRecord",
    "ExperimentConfig",
    "ExperimentPaths",
    "FeatureEncoder",
    "FollowupGenerator",
    "LatentCode",
    "MalignancyClassifier",
    "MetricsReport",
    "NoduleRecord",
    "NoduleVae",
    "NoiseSchedule",
    "RunTrace",
    "SoftPromptBank",
    "TextBackbone",
    "Vocabulary",
    "alignment_loss",
    "auprc",
    "auroc",
    "ddim_sample",
    "ddim_timesteps",
    "embed_context",
    "fid",
    "forward_diffuse",
    "gaussian_kl",
    "generate_dataset",
    "k_run_evaluate",
    "load_config",
    "null_context",
    "parse_report",
    "perceptual_distance",
    "perceptual_loss",
    "predictive_loss",
    "render_report",
    "run_ablation",
    "run_all",
    "run_stage",
    "spearman",
    "split_dataset",
    "total_vae_loss",
    "train_conditional",
    "train_unconditional",
    "variance_analysis",
]
