"""Foreground-covering prototypes for few-shot segmentation on synthetic features."""

from .autodiff import ContractError, DegenerateInputError, DimensionError, Parameter, Tensor, grad_check
from .fileio import FormatError, load_feature_map, load_mask_pgm, save_feature_map, save_mask_pgm
from .harness import (
    CheckpointError,
    Episode,
    EvalReport,
    RunConfig,
    TrainingDiverged,
    evaluate,
    load_checkpoint,
    load_config,
    parse_config,
    run_ablation,
    sample_episode,
    save_checkpoint,
    train,
)
from .losses import LossConfig, total_loss
from .model import ModelConfig, forward, init_params
from .pseudomask import attention_mask, conventional_pseudo_mask, mask_metrics
from .synthfeat import ConfigError, SamplingError, complementarity_stats, make_dataset

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "DimensionError",
    "Episode",
    "EvalReport",
    "FormatError",
    "LossConfig",
    "ModelConfig",
    "Parameter",
    "RunConfig",
    "SamplingError",
    "Tensor",
    "TrainingDiverged",
    "attention_mask",
    "complementarity_stats",
    "conventional_pseudo_mask",
    "evaluate",
    "forward",
    "grad_check",
    "init_params",
    "load_checkpoint",
    "load_config",
    "load_feature_map",
    "load_mask_pgm",
    "make_dataset",
    "mask_metrics",
    "parse_config",
    "run_ablation",
    "sample_episode",
    "save_checkpoint",
    "save_feature_map",
    "save_mask_pgm",
    "total_loss",
    "train",
]
