"""Temporal attention blocks for video features, on a small numpy autodiff core."""

from .errors import (ChecksumError, ConfigError, ContractError, DimensionError, FormatError, GtaError,
                     IntegrityError, NumericError)
from .model import Model, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .plan import parse_plan

__version__ = "0.1.0"

__all__ = [
    "ChecksumError", "ConfigError", "ContractError", "DimensionError", "FormatError", "GtaError",
    "IntegrityError", "NumericError", "Model", "ModelSpec", "build_model", "load_checkpoint",
    "save_checkpoint", "parse_plan",
]
