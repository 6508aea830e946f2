"""Visual-word codebooks and hybrid pooling for class activation maps."""

from .errors import (
    CamwordsError,
    ConfigError,
    ContractError,
    FormatError,
    InitializationError,
    NonFiniteLossError,
    ParameterError,
    ScheduleError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CamwordsError",
    "ConfigError",
    "ContractError",
    "FormatError",
    "InitializationError",
    "NonFiniteLossError",
    "ParameterError",
    "ScheduleError",
    "ShapeError",
    "__version__",
]
