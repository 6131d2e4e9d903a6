"""codex3d: two-view to volume translation in a vector-quantized code space.

Two independently trained VQ autoencoders compress 2D views and 3D volumes
to integer code grids; a masked-code diffusion model with an unconstrained
transformer generates 3D codes conditioned on the 2D codes.
"""

__version__ = "0.1.0"

from codex3d.errors import (
    CodexError,
    ConfigError,
    DataFormatError,
    DependencyError,
    NumericalError,
)

__all__ = [
    "CodexError",
    "ConfigError",
    "DataFormatError",
    "DependencyError",
    "NumericalError",
    "__version__",
]
