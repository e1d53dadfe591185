"""Exception hierarchy shared by all pipeline stages."""


class RisError(Exception):
    """Base class for every error raised by risbench."""


# hashing
class InvalidImage(RisError, ValueError):
    pass


class InvalidDimension(RisError, ValueError):
    pass


class AlgorithmMismatch(RisError, ValueError):
    pass


class DimensionMismatch(RisError, ValueError):
    pass


# metrics
class InvalidCutoff(RisError, ValueError):
    pass


class EmptyInput(RisError, ValueError):
    pass


# network / acquisition
class NetworkError(RisError):
    retryable = True


class PermanentNetworkError(NetworkError):
    """A failure that retrying will not fix (4xx other than 429, missing local file)."""

    retryable = False


class APIUnavailable(NetworkError):
    pass


class DownloadFailed(NetworkError):
    pass


class UnknownContentType(RisError):
    pass


# engines
class UploadRejected(RisError):
    pass


class RateLimited(NetworkError):
    pass


class ParseFailure(RisError):
    pass


class FixtureError(RisError):
    pass


# store
class ChecksumMismatch(RisError):
    pass


class LockHeld(RisError):
    pass


class ConfigError(RisError):
    pass
