"""Tied deconvolutional feature stacking for weakly-supervised segmentation.

A small numpy engine: convolution stacks with pooling switches, tied
unpool/deconvolution stages, per-map normalized feature stacking, a
class-map head aggregated by log-sum-exp pooling, trained from image-level
labels only and scored by pixel IoU.
"""

from tiedseg.errors import (
    CheckpointFormatError,
    ConfigError,
    ImageFormatError,
    InputError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointFormatError",
    "ConfigError",
    "ImageFormatError",
    "InputError",
    "ShapeError",
    "StateError",
]
