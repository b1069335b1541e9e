"""Multi-expert classifier with attention-diversity training and open-set rejection."""

from .errors import MedafError
from .experiment import ExperimentConfig, calibrate, evaluate, train
from .network import MedafConfig, build_model, forward
from .scoring import UNKNOWN

__version__ = "0.1.0"

__all__ = [
    "MedafError",
    "ExperimentConfig",
    "MedafConfig",
    "UNKNOWN",
    "build_model",
    "calibrate",
    "evaluate",
    "forward",
    "train",
]
