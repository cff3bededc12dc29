class ConfigError(ValueError):
    """Invalid configuration, shapes or arguments."""


class TrainingError(RuntimeError):
    """A training run diverged (non-finite loss or gradient)."""


class PretrainingError(TrainingError):
    """The pretrained extractor failed its feature-decodability checks."""
