"""Hierarchical two-step GRPO on a synthetic voxel world."""

from .config import Config, ConfigError, load_config
from .env import PromptSpec, VoxelShape, rasterize_prompt, sample_prompt
from .harness import TrainingAborted, ablate, evaluate, named_grid, scaling_run, train
from .policy import Dims, PolicyParams, load_checkpoint, save_checkpoint
from .rng import Stream

__version__ = "0.1.0"
