"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """An argument is outside its documented domain."""


class DomainError(ArgumentError):
    """Input values lie outside an operation's numeric domain."""


class DimensionError(ValueError):
    """Incompatible tensor or codebook shapes."""


class UsageError(RuntimeError):
    """The autodiff tape or an API was used incorrectly."""


class ConfigurationError(ValueError):
    """A model configuration or checkpoint combination is invalid."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


class IngestionError(ValueError):
    """A dataset is empty or has inconsistent cube shapes."""


class ParseError(ValueError):
    """A binary file could not be decoded."""


class BadMagicError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class DimensionOverflowError(ParseError):
    pass


class UnsupportedVersionError(ParseError):
    pass
