"""Occlusion-aware plant cover estimation from per-pixel species probabilities."""

from coverhead.core import (
    DEFAULT_REGISTRY,
    SCHMIDT_BINS,
    Annotation,
    CoverheadError,
    SpeciesRegistry,
    schmidt_quantize,
    validate_cover,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_REGISTRY",
    "SCHMIDT_BINS",
    "Annotation",
    "CoverheadError",
    "SpeciesRegistry",
    "schmidt_quantize",
    "validate_cover",
    "__version__",
]
