"""Desk-scale lab for comparing transfer-learning adaptation protocols under simplicity bias."""
from .errors import ConfigError, PretrainingError, TrainingError

__all__ = ["ConfigError", "PretrainingError", "TrainingError"]
__version__ = "0.1.0"
