"""snapsci: photon-limited snapshot compressive imaging toolkit.

Simulates raw compressive video measurements through hardware-friendly tiled
binary masks with a Poisson-Gaussian sensor model, trains a small asymmetric
space-time autoencoder directly on those measurements with a rate-constrained
objective, and evaluates reconstruction, edge, and depth heads.
"""

__version__ = "0.1.0"

from .core import (
    ConfigError,
    DataError,
    FormatError,
    CalibrationError,
    NumericError,
    MaskStack,
    Measurement,
    PhotonModel,
    RandomStream,
    SubMaskStack,
    ToolkitError,
    VideoCube,
    derive_stream,
    tensor_read,
    tensor_write,
)

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "CalibrationError",
    "NumericError",
    "MaskStack",
    "Measurement",
    "PhotonModel",
    "RandomStream",
    "SubMaskStack",
    "ToolkitError",
    "VideoCube",
    "derive_stream",
    "tensor_read",
    "tensor_write",
]
