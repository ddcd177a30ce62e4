"""Exception hierarchy shared by every module."""


class DfjssError(Exception):
    """Base class for all package errors."""


class ConfigError(DfjssError):
    pass


class InvalidConfig(ConfigError):
    pass


class MalformedSequence(DfjssError, ValueError):
    pass


class IndexOutOfRange(DfjssError, IndexError):
    pass


class EmptySubpopulation(DfjssError):
    pass


class InsufficientGenerations(DfjssError):
    pass


class FormatVersionMismatch(DfjssError):
    pass


class ShapeMismatch(DfjssError):
    pass


class SequenceTooLong(DfjssError, ValueError):
    pass


class EmptyDataset(DfjssError):
    pass


class RegenerationOverflow(DfjssError):
    pass


class InvalidSize(DfjssError, ValueError):
    pass


class ParseError(DfjssError):
    pass


class DegenerateSample(DfjssError, ValueError):
    pass
