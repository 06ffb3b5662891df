"""Single-stream vision-language pretraining at desk scale, in numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthConfig, generate_synthetic, load_pairs, synthetic_vocabulary, tokenize_records
from .encoder import EncoderConfig
from .model import ModelConfig, init_params
from .training import TrainConfig, lr_schedule, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "ModelConfig", "SynthConfig", "TrainConfig", "generate_synthetic", "init_params",
    "load_checkpoint", "load_pairs", "lr_schedule", "save_checkpoint", "synthetic_vocabulary",
    "tokenize_records", "train",
]
