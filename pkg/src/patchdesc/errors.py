"""Exception hierarchy shared by every module of the package."""


class PatchDescError(Exception):
    """Base class for all errors raised by patchdesc."""


class DimensionError(PatchDescError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateBatchError(PatchDescError, ValueError):
    pass


class InvalidCacheError(PatchDescError, ValueError):
    """A backward pass was handed a cache it cannot consume."""


class InvalidGridError(PatchDescError, ValueError):
    pass


class DomainError(PatchDescError, ValueError):
    pass


class DegenerateMarginError(PatchDescError, ValueError):
    pass


class ParseError(PatchDescError, ValueError):
    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class ModelFormatError(PatchDescError):
    """A model or checkpoint file cannot be read back."""


class FormatVersionError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class IngestionError(PatchDescError):
    """The on-disk dataset layout is missing or inconsistent."""


class IntegrityError(PatchDescError):
    """Pair list and patch store disagree."""


class RoleError(PatchDescError):
    """A test split was handed to a training-only operation."""


class NumericAbort(PatchDescError, FloatingPointError):
    def __init__(self, message, iteration=None, batch_ids=None):
        super().__init__(message)
        self.iteration = iteration
        self.batch_ids = batch_ids
