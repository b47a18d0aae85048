"""Pointmap-based dense SLAM backend with a pluggable two-view predictor."""

from .lie import Sim3

__version__ = "0.1.0"

__all__ = ["Sim3", "__version__"]
