"""Arbitrary-scale super-resolution for screen content images, in numpy."""

from .model import Model, ModelConfig, load, preset, save

__all__ = ["Model", "ModelConfig", "load", "preset", "save"]
__version__ = "0.1.0"
