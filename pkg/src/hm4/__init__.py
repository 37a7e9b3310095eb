"""Memory-scalable visual place recognition with a two-tier HMM.

Kernels run from a compiled extension when available; ``hm4.BACKEND``
reports which one was loaded.
"""
from ._kernels import BACKEND
from .errors import (ConfigError, FormatError, HM4Error, InvalidArgumentError, LostStateError,
                     NotFoundError, StorageError)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "FormatError",
    "HM4Error",
    "InvalidArgumentError",
    "LostStateError",
    "NotFoundError",
    "StorageError",
]
