"""From-scratch neural network for voicing detection (forward and backward)."""

from .model import (
    DccrnModel,
    ModelConfig,
    VoicingPosterior,
    bce_loss,
    count_params,
    decide_voicing,
)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "DccrnModel",
    "ModelConfig",
    "VoicingPosterior",
    "bce_loss",
    "count_params",
    "decide_voicing",
    "load_checkpoint",
    "save_checkpoint",
]
