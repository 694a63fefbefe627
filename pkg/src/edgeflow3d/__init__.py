"""edgeflow3d: blind 3D volume harmonization.

Trains an edge-to-image rectified-flow model on target-domain volumes
only, harmonizes unseen source-domain volumes via edge extraction, flow
sampling and correlation-based refinement, and ships synthetic phantom
generation, blind baselines and image-quality metrics for validating the
whole pipeline.
"""

__version__ = "0.1.0"

from .volume import Volume3D, NormalizationRecord, load_volume, save_volume
from .edges import EdgeMap, CannyConfig, adaptive_edge_detect, canny_3d
from .errors import (
    EdgeflowError,
    UsageError,
    DataError,
    FormatError,
    DegenerateInputError,
    CapacityError,
    ConvergenceError,
)

__all__ = [
    "Volume3D",
    "NormalizationRecord",
    "load_volume",
    "save_volume",
    "EdgeMap",
    "CannyConfig",
    "adaptive_edge_detect",
    "canny_3d",
    "EdgeflowError",
    "UsageError",
    "DataError",
    "FormatError",
    "DegenerateInputError",
    "CapacityError",
    "ConvergenceError",
]
