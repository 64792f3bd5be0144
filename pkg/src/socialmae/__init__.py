"""
Social-MAE
==========

A desk-scale audiovisual masked autoencoder: log-Mel and tubelet tokenization, modality
encoders feeding a shared joint encoder, a joint decoder trained with masked reconstruction
and contrastive alignment, and fine-tuning heads for emotion, laughter and personality tasks.
"""

from .errors import (
    ConfigurationError,
    DataError,
    InternalError,
    NonFiniteError,
    ShapeError,
    SocialMAEError,
    UsageError,
)
from .model import InputMode, SocialMAE, SocialMAEForTask, TaskHead
from .runconfig import build_run_config
from .training import evaluate, finetune, pretrain
from .types import FinetuneRecipe, PretrainRecipe, RunConfig

__all__ = [
    "SocialMAE",
    "SocialMAEForTask",
    "TaskHead",
    "InputMode",
    "RunConfig",
    "PretrainRecipe",
    "FinetuneRecipe",
    "build_run_config",
    "pretrain",
    "finetune",
    "evaluate",
    "SocialMAEError",
    "ConfigurationError",
    "ShapeError",
    "UsageError",
    "DataError",
    "InternalError",
    "NonFiniteError",
]
