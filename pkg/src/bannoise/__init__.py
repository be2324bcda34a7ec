"""Backdoor detection and removal with adversarial neuron noise."""

from bannoise.errors import (
    BanError,
    ConfigurationError,
    DefenseError,
    EvaluationError,
    IngestionError,
    InputError,
    OptimizationError,
    PlottingError,
    TrainingError,
)
from bannoise.model import LayeredClassifier, ParamSelection, build_model

__version__ = "0.1.0"

__all__ = [
    "BanError",
    "ConfigurationError",
    "DefenseError",
    "EvaluationError",
    "IngestionError",
    "InputError",
    "LayeredClassifier",
    "OptimizationError",
    "ParamSelection",
    "PlottingError",
    "TrainingError",
    "build_model",
]
