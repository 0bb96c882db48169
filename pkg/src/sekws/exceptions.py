"""Exception hierarchy shared by every module."""


class SekwsError(Exception):
    """Base class for all package errors."""


class ShapeError(SekwsError, ValueError):
    """Array lengths or shapes do not satisfy an operation's contract."""


class DegenerateInputError(SekwsError, ValueError):
    """Input has zero power where a ratio needs a nonzero denominator."""


class InsufficientLengthError(ShapeError):
    """A source signal is shorter than the requested segment."""


class DomainError(SekwsError, ValueError):
    """A scalar argument lies outside its admissible range."""


class InvalidCorpusError(SekwsError, ValueError):
    """A corpus is missing classes needed by an operation."""


class ManifestError(SekwsError, ValueError):
    """A manifest row cannot be loaded.

    ``row`` is the zero-based data-row index (header excluded).
    """

    def __init__(self, row, message):
        self.row = row
        super().__init__(f"manifest row {row}: {message}")


class UnknownLabelError(ManifestError):
    pass


class NonFiniteLossError(SekwsError, FloatingPointError):
    """Training produced a NaN or infinite loss."""


class InvalidSpecError(SekwsError, ValueError):
    """An experiment or matrix specification is inconsistent."""


class CheckpointError(SekwsError, ValueError):
    pass
