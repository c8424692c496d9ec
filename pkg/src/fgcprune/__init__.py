"""Dynamic channel pruning via feature-gate coupling, on a small numpy autodiff core."""

from .config import RunConfig, load_config
from .errors import (ConfigError, ContractError, DataFormatError, DimensionError, FGCError,
                     NumericError)
from .tensor import Tensor
from .trainer import Trainer, analyze, evaluate, train

__all__ = [
    "ConfigError", "ContractError", "DataFormatError", "DimensionError", "FGCError",
    "NumericError", "RunConfig", "Tensor", "Trainer", "analyze", "evaluate", "load_config", "train",
]
__version__ = "0.1.0"
