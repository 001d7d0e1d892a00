"""Exception types shared across the toolkit."""


class AsdkitError(Exception):
    """Base class for all toolkit errors."""


class FileError(AsdkitError):
    """A file could not be read or written."""


class FormatError(AsdkitError):
    """A file exists but is not in the accepted format."""


class FilenameError(AsdkitError):
    """A file name does not match the expected dataset naming pattern."""


class ValidationError(AsdkitError):
    """Input values violate an operation's preconditions."""


class ShapeError(AsdkitError):
    """Array arguments have inconsistent shapes."""


class QuotaError(AsdkitError):
    """More clips were requested than the available pool provides."""


class ConfigurationError(AsdkitError):
    """Invalid or inconsistent configuration."""


class NumericFault(AsdkitError):
    """Non-finite values were produced during numerical computation."""


class IllConditioningError(AsdkitError):
    """The problem is too ill-conditioned to solve reliably."""


class ArtifactError(AsdkitError):
    """A stored artifact is missing, corrupt, or inconsistent."""
