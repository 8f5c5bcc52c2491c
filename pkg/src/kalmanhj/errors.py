"""Exception hierarchy shared by all modules."""


class KalmanHJError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(KalmanHJError, ValueError):
    pass


class NotControllableError(KalmanHJError):
    pass


class AmbiguousRankError(KalmanHJError):
    """Singular values fall in the band where the numerical rank is unclear."""


class InternalConsistencyError(KalmanHJError):
    """Two independent evaluation routes disagree."""


class IllConditionedHorizonError(KalmanHJError):
    pass


class NoConvergenceError(KalmanHJError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class HTooLargeError(KalmanHJError):
    pass


class InvalidExponentError(KalmanHJError, ValueError):
    pass


class GridSpecError(KalmanHJError, ValueError):
    pass


class TooCoarseError(KalmanHJError):
    pass


class DomainMismatchError(KalmanHJError, ValueError):
    pass


class ConfigError(KalmanHJError, ValueError):
    pass


class UnknownPresetError(ConfigError):
    pass
