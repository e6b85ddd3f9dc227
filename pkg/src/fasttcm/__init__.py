"""Desk-scale bridge between a convolutional image encoder and a prompted text encoder.

Everything runs on a small numpy autodiff engine (:mod:`fasttcm.tensor`).
"""

from .config import Config, ConfigError
from .model import FastTCM

__all__ = ["Config", "ConfigError", "FastTCM"]
__version__ = "0.1.0"
