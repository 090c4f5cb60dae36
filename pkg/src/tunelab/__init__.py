"""Desk-scale laboratory for tuning frozen transformer backbones.

Everything runs on plain numpy under a small hand-written reverse-mode
autodiff engine, so experiments stay reproducible to the bit on a laptop.
"""

from .errors import (
    ConfigError,
    CorpusSizeError,
    LengthError,
    NumericDomainError,
    ShapeError,
    TrainingDivergedError,
    TransformSpecError,
    TuneLabError,
)
from .tensor import Graph, Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorpusSizeError",
    "Graph",
    "LengthError",
    "NumericDomainError",
    "ShapeError",
    "Tensor",
    "TrainingDivergedError",
    "TransformSpecError",
    "TuneLabError",
    "grad_check",
    "no_grad",
    "__version__",
]
