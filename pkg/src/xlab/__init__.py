"""Positional-scheme length-extrapolation lab on a small numpy autodiff core."""

from .model import ModelConfig, Transformer
from .posenc import PositionalScheme

__all__ = ["ModelConfig", "PositionalScheme", "Transformer"]
__version__ = "0.1.0"
