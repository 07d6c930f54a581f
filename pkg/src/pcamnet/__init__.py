"""Position-prior clustering attention for thin-structure volumetric segmentation.

Submodules: ``tensor`` (autograd core), ``morphology``, ``pcam``, ``segnet``,
``losses``, ``metrics``, ``synthdata``, ``training`` and ``cli``.
"""
from .config import RunConfig
from .errors import (ConfigError, ContractError, DataError, DegenerateClassError, DimensionError,
                     NumericError, PCAMError)
from .pcam import pcam_apply, pcam_flops, pcam_forward
from .segnet import Network, NetworkConfig
from .synthdata import SynthSpec
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DegenerateClassError", "DimensionError",
    "GradTape", "Network", "NetworkConfig", "NumericError", "PCAMError", "RunConfig", "SynthSpec",
    "Tensor", "pcam_apply", "pcam_flops", "pcam_forward",
]
