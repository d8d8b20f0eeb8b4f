"""raywatch: one-class anomaly detection for simulation image streams.

Train on frames known to be good, flag the ones that are not, and plug the
verdict back into the producing simulation: offline (post hoc), online
(retrain per frame), or in situ (exit-code CLI / persistent daemon).
"""

from .errors import (
    BindError,
    DecodeError,
    DimensionMismatch,
    FormatError,
    InBandError,
    InsufficientData,
    InvalidHyperparameter,
    NonFiniteInput,
    RaywatchError,
    RegionOutOfBounds,
    RewindLimitExceeded,
)

__all__ = [
    "BindError",
    "DecodeError",
    "DimensionMismatch",
    "FormatError",
    "InBandError",
    "InsufficientData",
    "InvalidHyperparameter",
    "NonFiniteInput",
    "RaywatchError",
    "RegionOutOfBounds",
    "RewindLimitExceeded",
]

__version__ = "0.1.0"
