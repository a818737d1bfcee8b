"""Exception hierarchy shared by readers, validators and the CLI."""


class LndetError(Exception):
    """Base class for all toolkit errors."""


class FormatError(LndetError, ValueError):
    """Input bytes or records do not follow the file format."""


class ValidationError(LndetError, ValueError):
    """Well-formed input violates a domain invariant."""


class BadMagicError(FormatError):
    pass


class TruncatedVolumeError(FormatError):
    pass


class ZeroDimsError(ValidationError):
    pass


class NothingToMatch(LndetError):
    """Raised when an image has no ground truth to match against."""


class NoGroundTruth(LndetError):
    """Raised when a metric is undefined because there is no ground truth."""
