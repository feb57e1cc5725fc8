"""Configs, file formats and the commands that tie the modules together."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig

__all__ = ["CheckpointError", "ConfigError", "RunConfig", "load_checkpoint", "save_checkpoint"]
