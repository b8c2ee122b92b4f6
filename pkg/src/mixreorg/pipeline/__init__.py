"""Training, checkpointing, evaluation and ablation."""

from .checkpoint import TrainState, latest_checkpoint, load_checkpoint, save_checkpoint
from .train import TrainingAborted, train

__all__ = ["TrainState", "TrainingAborted", "latest_checkpoint", "load_checkpoint", "save_checkpoint", "train"]
