"""Training, evaluation and ablation pipeline."""

from .checkpoint import Checkpoint
from .config import TrainConfig, load_config, parse_config_text
from .optim import AdamWState, adamw_step
from .trainer import Trainer, TrainResult, train

__all__ = ["AdamWState", "Checkpoint", "TrainConfig", "TrainResult", "Trainer", "adamw_step", "load_config",
           "parse_config_text", "train"]
