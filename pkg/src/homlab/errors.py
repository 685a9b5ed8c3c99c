"""Exception hierarchy shared by every homlab module."""


class HomlabError(Exception):
    pass


class DomainError(HomlabError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConvergenceError(HomlabError, ArithmeticError):
    """A numerical refinement failed to reach its tolerance."""


class CapacityError(HomlabError, MemoryError):
    pass


class UnsortedError(HomlabError, ValueError):
    """A stream that must be time-sorted is not."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FormatError(HomlabError, ValueError):
    """Malformed TTAG1 data. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientStatistics(HomlabError):
    pass


class ConfigError(HomlabError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
