"""Multimodal training with graph-routed distillation between per-modality networks."""

__version__ = "0.1.0"
