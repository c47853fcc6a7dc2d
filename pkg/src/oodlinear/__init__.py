"""Out-of-distribution scoring and test-time linear rectification.

The package computes OOD scores from classifier logits (max softmax,
energy, KL-to-uniform, input perturbation), then rectifies them by
regressing the scores onto the feature representation of the very test
set being scored.  The linear fit can run in one shot, robustly with a
residual-based sample filter, or online over a stream of batches.
"""

from oodlinear import calibrate, datasets, io, linalg, metrics, mlp, pipeline, scorers
from oodlinear.errors import (
    ConfigurationError,
    CorruptionError,
    FormatError,
    InsufficientDataError,
    ShapeError,
    UndefinedMetricError,
)

__all__ = [
    "calibrate",
    "datasets",
    "io",
    "linalg",
    "metrics",
    "mlp",
    "pipeline",
    "scorers",
    "ConfigurationError",
    "CorruptionError",
    "FormatError",
    "InsufficientDataError",
    "ShapeError",
    "UndefinedMetricError",
]
