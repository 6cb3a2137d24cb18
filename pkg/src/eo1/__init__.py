"""Observation-space world model toolkit on synthetic multi-sensor data.

The package covers the full loop: synthetic truth and instrument
simulation, per-sensor tokenization (satellite rasters and irregular
station sets), masked multimodal fusion on a shared token lattice, latent
forecasting, product inversion, and the evaluation and scaling harness.
"""

__version__ = "0.1.0"

from .errors import DivergenceError, IntegrityError, ValidationError

__all__ = [
    "DivergenceError",
    "IntegrityError",
    "ValidationError",
    "__version__",
]
