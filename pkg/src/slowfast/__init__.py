"""Slow-fast two-branch transformer for machine translation, on a small numpy autodiff core."""

from .model import ModelConfig, SlowFastTransformer
from .training import TrainConfig

__all__ = ["ModelConfig", "SlowFastTransformer", "TrainConfig"]
__version__ = "0.1.0"
