"""Multimodal masked visual sequence transformer for semantic future prediction."""

from .types import (
    Fusion,
    Horizon,
    MaskingStrategy,
    MaskSet,
    ModalitySpec,
    ModelConfig,
    OptimizerConfig,
    Schedule,
    TokenLayout,
    desk_config,
    token_coords,
    token_index,
    validate_config,
)
from .model import FuturePredictor, build_model
from .training import Checkpoint, load_checkpoint, masked_loss, restore_model, save_checkpoint, train
from .rollout import predict_next, rollout
from .evaluation import CopyLastPredictor, ModelPredictor, evaluate

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CopyLastPredictor",
    "FuturePredictor",
    "Fusion",
    "Horizon",
    "MaskSet",
    "MaskingStrategy",
    "ModalitySpec",
    "ModelConfig",
    "ModelPredictor",
    "OptimizerConfig",
    "Schedule",
    "TokenLayout",
    "build_model",
    "desk_config",
    "evaluate",
    "load_checkpoint",
    "masked_loss",
    "predict_next",
    "restore_model",
    "rollout",
    "save_checkpoint",
    "token_coords",
    "token_index",
    "train",
    "validate_config",
]
