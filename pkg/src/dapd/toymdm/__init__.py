"""Synthetic modular-sum MRF testbed: data, toy transformer, training."""
from .checkpoint import Checkpoint, CheckpointError, load, save
from .data import LABELS, complete, corrupt, gen_dataset, is_valid
from .denoiser import ToyDenoiser, forward
from .model import ModelConfig
from .train import TrainConfig, TrainingDiverged, mdm_loss, train

__all__ = [
    "Checkpoint", "CheckpointError", "load", "save",
    "LABELS", "complete", "corrupt", "gen_dataset", "is_valid",
    "ToyDenoiser", "forward", "ModelConfig",
    "TrainConfig", "TrainingDiverged", "mdm_loss", "train",
]
