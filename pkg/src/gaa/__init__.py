"""Region-guided anomaly mask synthesis and curation toolkit.

The package covers the non-generative half of an aligned anomaly synthesis
pipeline: fine-grained clustering of anomaly descriptors, geometric mask
enhancement, placement of masks into semantic regions of normal images, and
scoring/filtering of the image-mask pairs an external generator produces.
"""

from gaa.errors import (
    ConfigError,
    DegenerateEnhancementError,
    GaatFormatError,
    InfeasiblePlacementError,
    StageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateEnhancementError",
    "GaatFormatError",
    "InfeasiblePlacementError",
    "StageError",
    "__version__",
]
