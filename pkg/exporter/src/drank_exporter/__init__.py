"""Checkpoint-to-.dst exporter and calibration Gram capture for the compression engine."""

from .export import CalibrationConfig, capture_gram, capture_gram_from_batches, export_weights

__version__ = "0.1.0"

__all__ = ["CalibrationConfig", "capture_gram", "capture_gram_from_batches", "export_weights", "__version__"]
