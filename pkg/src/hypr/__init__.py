"""Subsequence-parallel forward-gradient training for recurrent spiking
networks, with exact sequential oracles and a train/verify/bench CLI."""

from .engine import HyprEngine
from .errors import ConfigError, DataFormatError, HyprError, NumericError
from .losses import LossSpec
from .network import LayerParams, LayerSpec, NetworkConfig, init_params
from .neurons import ModelKind
from .surrogates import Surrogate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataFormatError",
    "HyprError",
    "HyprEngine",
    "LayerParams",
    "LayerSpec",
    "LossSpec",
    "ModelKind",
    "NetworkConfig",
    "NumericError",
    "Surrogate",
    "init_params",
    "__version__",
]
