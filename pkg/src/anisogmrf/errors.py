class AnisoError(Exception):
    """Base class for library errors."""


class GridError(AnisoError, ValueError):
    pass


class DomainError(AnisoError, ValueError):
    pass


class RankDeficientError(AnisoError, ValueError):
    def __init__(self, msg, axis=None):
        super().__init__(msg)
        self.axis = axis


class OmegaUndefinedError(AnisoError, ValueError):
    pass


class NotSPDError(AnisoError, ArithmeticError):
    def __init__(self, msg, pivot=None, params=None):
        super().__init__(msg)
        self.pivot = pivot
        self.params = params


class InfeasiblePoint(AnisoError, ArithmeticError):
    pass


class ConfigError(AnisoError, ValueError):
    pass


class DataError(AnisoError, ValueError):
    def __init__(self, msg, row=None):
        super().__init__(msg)
        self.row = row
