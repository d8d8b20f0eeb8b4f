"""Exception types shared across the toolkit."""


class RaywatchError(Exception):
    """Base class for all toolkit errors."""


class DecodeError(RaywatchError):
    """An image file exists but cannot be decoded."""


class RegionOutOfBounds(RaywatchError):
    """A crop region does not lie within the source image."""


class DimensionMismatch(RaywatchError):
    """Operands have incompatible shapes."""


class NonFiniteInput(RaywatchError):
    """Input contains NaN or infinite values."""


class FormatError(RaywatchError):
    """A matrix or container file is malformed."""


class InvalidHyperparameter(RaywatchError):
    """A model hyperparameter is outside its valid range."""


class InsufficientData(RaywatchError):
    """Not enough training rows to fit the requested pipeline."""


class BindError(RaywatchError):
    """The sentinel daemon could not bind its endpoint."""


class InBandError(RaywatchError):
    """The daemon reported an error in its reply."""


class RewindLimitExceeded(RaywatchError):
    """The workflow driver re-failed the same checkpoint too many times.

    Carries the run log accumulated up to the abort.
    """

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []
