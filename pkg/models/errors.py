"""Exception hierarchy shared by the numerical models and the application layer."""


class EditLabError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(EditLabError, ValueError):
    pass


class NotSymmetric(EditLabError, ValueError):
    pass


class NotPositiveDefinite(EditLabError, ValueError):
    pass


class DegenerateSpread(EditLabError, ValueError):
    pass


class EmptyInput(EditLabError, ValueError):
    pass


class SequenceTooLong(EditLabError, ValueError):
    pass


class SequenceTooShort(EditLabError, ValueError):
    pass


class TokenOutOfRange(EditLabError, ValueError):
    pass


class CorpusTooSmall(EditLabError, ValueError):
    pass


class NonFiniteLoss(EditLabError, ValueError):
    pass


class ConfigInvalid(EditLabError, ValueError):
    pass


class WeightFormatError(EditLabError, ValueError):
    pass


class SuiteFormatError(EditLabError, ValueError):
    pass


class IoError(EditLabError, OSError):
    pass


class DenominatorBelowFloor(EditLabError, ValueError):
    """The rank-one denominator is too small relative to its key norms.

    Raised before the update is formed; a near-zero denominator is the
    signature of the single-edit collapse.
    """

    def __init__(self, denominator: float, threshold: float):
        self.denominator = denominator
        self.threshold = threshold
        super().__init__(
            f"|denominator| = {abs(denominator):.3e} is below the floor {threshold:.3e}"
        )
