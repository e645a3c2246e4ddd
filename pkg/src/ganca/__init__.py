"""Edge-conditioned neural cellular automata trained with L2 or adversarial losses."""

from .errors import ConfigError, GancaError, ImageIOError, TrainingDiverged, UsageError
from .nca import NcaParams, nca_rollout, nca_step

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "GancaError",
    "ImageIOError",
    "NcaParams",
    "TrainingDiverged",
    "UsageError",
    "nca_rollout",
    "nca_step",
]
