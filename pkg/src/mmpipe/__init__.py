"""Per-iteration pipeline schedule planning for multimodal model training."""

__version__ = "0.1.0"
