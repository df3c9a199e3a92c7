"""Shape from polarization: Stokes decomposition, Fresnel physics, a physics solver,
ground-truth preparation, metrics and a small trainable network."""

__version__ = "0.1.0"

from polarsfp.camera import CameraModel
from polarsfp.errors import (
    ConfigurationError, DimensionError, DomainError, NoValidPixelsError, NumericalError, PolarSfPError,
)
from polarsfp.fresnel import ReflectionType
from polarsfp.metrics import MetricsReport
from polarsfp.polar import PolarizerStack, StokesMaps, decompose, synthesize
from polarsfp.scene import NormalMap

__all__ = [
    "CameraModel", "ConfigurationError", "DimensionError", "DomainError", "MetricsReport", "NoValidPixelsError",
    "NormalMap", "NumericalError", "PolarSfPError", "PolarizerStack", "ReflectionType", "StokesMaps",
    "decompose", "synthesize",
]
