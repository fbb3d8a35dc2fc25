"""Multichannel source separation and diarization scoring."""

from .core import ActivityMask, ArrayManifest, SepdiarError, Spectrogram

__version__ = "0.1.0"

__all__ = [
    "ActivityMask",
    "ArrayManifest",
    "SepdiarError",
    "Spectrogram",
    "__version__",
]
