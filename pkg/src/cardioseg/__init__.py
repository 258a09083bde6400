"""Cardiac MRI segmentation with an edge-augmented attention U-Net.

Pure-numpy implementation: tensors with reverse-mode autodiff, the network
itself, Sobel edge priors, a NIfTI-1 reader, training utilities, overlap and
boundary metrics, and a command-line pipeline for phantom-data experiments.
"""

from .tensor import NumericError, ShapeError, Tape, TapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "NumericError",
    "__version__",
]
