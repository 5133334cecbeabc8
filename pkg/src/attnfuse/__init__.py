"""Attention-weighted fusion of multi-task uncertainty maps for
pixel-wise failure detection, with a synthetic multi-task benchmark."""

__version__ = "0.1.0"

# harness and figures are imported on demand; they pull in matplotlib
from . import attnet, metrics, ngio, numgrid, synthworld, uncert

__all__ = ["attnet", "figures", "harness", "metrics", "ngio", "numgrid",
           "synthworld", "uncert", "__version__"]
