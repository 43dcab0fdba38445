"""Student encoder with its losses and training loops."""

from .losses import (LossWeights, TeacherSchedule, TeacherSpec, loss_contrastive_instance,
                     loss_contrastive_semantic, loss_match, loss_total)
from .model import DistillModel, EncoderConfig, load_checkpoint, save_checkpoint

__all__ = [
    "DistillModel", "EncoderConfig", "LossWeights", "TeacherSchedule", "TeacherSpec",
    "load_checkpoint", "loss_contrastive_instance", "loss_contrastive_semantic", "loss_match",
    "loss_total", "save_checkpoint",
]
