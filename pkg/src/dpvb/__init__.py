"""Dirichlet-process random-effects model: variational and Gibbs engines."""

from .model import ConfigError, GroupedDataset, ModelConfig, TruncationError
from .special import DomainError, Rng

__all__ = ["ConfigError", "DomainError", "GroupedDataset", "ModelConfig", "Rng", "TruncationError"]
__version__ = "0.1.0"
