"""Masked mean-teacher domain adaptation for semantic segmentation on synthetic street scenes."""
from .config import Config, load_config
from .datagen import ClassPartition, DomainShiftParams, LabeledImage, SceneConfig
from .errors import (ConfigError, DataError, DegenerateVectorError, EmptyDataError, EvaluationError,
                     FormatError, OmudaError, SamplingIndexError, TrainingDivergence)
from .model import SegModel

__version__ = "0.1.0"

__all__ = [
    "Config", "load_config", "ClassPartition", "DomainShiftParams", "LabeledImage", "SceneConfig",
    "SegModel", "OmudaError", "ConfigError", "DataError", "DegenerateVectorError", "EmptyDataError",
    "EvaluationError", "FormatError", "SamplingIndexError", "TrainingDivergence",
]
