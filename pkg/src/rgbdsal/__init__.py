"""Desk-scale RGB-D salient object detection with cross-modal distillation."""

__version__ = "0.1.0"
