"""Topology-aware multiple-instance learning on instance graphs.

Bags of feature-vector instances become k-nearest-neighbor graphs; a minimum
spanning forest serializes each graph along four traversals; selective
state-space scans, a neighbor-softmax aggregation block, and attention
pooling turn the serialized bag into one prediction per bag, for binary or
multi-class classification and discrete-time survival.

Everything runs on a small reverse-mode differentiation substrate
(`topomil.numerics`) whose adjoints are validated against central finite
differences.
"""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig
from .data import load_manifest, read_bag, synth_generate, write_bag
from .errors import (
    DimensionError,
    FormatError,
    NumericError,
    UndefinedMetricError,
    ValidationError,
)
from .model import build_model, evaluate_model, forward_bag
from .train import evaluate_checkpoint, load_checkpoint, save_checkpoint, train

__all__ = [
    "DimensionError",
    "FormatError",
    "ModelConfig",
    "NumericError",
    "TrainConfig",
    "UndefinedMetricError",
    "ValidationError",
    "build_model",
    "evaluate_checkpoint",
    "evaluate_model",
    "forward_bag",
    "load_checkpoint",
    "load_manifest",
    "read_bag",
    "save_checkpoint",
    "synth_generate",
    "train",
    "write_bag",
    "__version__",
]
