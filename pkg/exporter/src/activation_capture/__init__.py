"""Capture adapter: hook a host model's final conv layer, emit engine files.

Runs inside the training/inference environment. For every sample it writes a
channel-first (K, D', H', W') float32 NPY activation file and appends one
manifest line with the model's predicted probability. The emitted files are
plain NPY v1.0 / JSON-Lines, consumable by the dissection engine without any
transformation; this package deliberately does not import the engine.

Preprocessing is not reimplemented here: inputs are expected to be the
normalized patches the rest of the pipeline produces.
"""

from .capture import (
    ActivationCapture,
    CaptureConfig,
    CaptureError,
    DuplicateSample,
    EmptyCapture,
    LayerNotFound,
    ShapeDrift,
)

__all__ = [
    "ActivationCapture",
    "CaptureConfig",
    "CaptureError",
    "DuplicateSample",
    "EmptyCapture",
    "LayerNotFound",
    "ShapeDrift",
]
