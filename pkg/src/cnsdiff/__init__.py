"""Diffusion-based negative sampling with a causal regularizer for out-of-distribution recommendation."""

__version__ = "0.1.0"

from .config import ConfigError, TrainConfig
from .corpus import (DataError, Dataset, GroundTruth, SplitBundle, SyntheticSpec, build_split, generate_synthetic,
                     load_interactions)
from .trainer import RunReport, fit, gradcheck

__all__ = [
    "ConfigError", "DataError", "Dataset", "GroundTruth", "RunReport", "SplitBundle", "SyntheticSpec",
    "TrainConfig", "build_split", "fit", "generate_synthetic", "gradcheck", "load_interactions",
]
