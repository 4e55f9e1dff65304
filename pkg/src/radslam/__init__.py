"""Exposure-invariant RGB-D tracking and HDR volumetric mapping."""

__version__ = "0.1.0"

from .se3 import Pose

__all__ = ["Pose", "__version__"]
