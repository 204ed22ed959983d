"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericalAbort -> 4.
"""


class FewsegError(Exception):
    """Base class for all package errors."""


class ConfigError(FewsegError):
    """Invalid or inconsistent configuration (bad keys, values, mismatched heads)."""


class DataError(FewsegError):
    """Unreadable or malformed data: datasets, masks, checkpoints, label ranges."""


class EpisodeError(DataError):
    """Episode sampling could not satisfy its constraints (e.g. mode `all`)."""


class CheckpointError(DataError):
    """Checkpoint container is corrupt, has a bad version, or fails its manifest."""


class UndefinedScoreError(DataError):
    """No class has a nonzero IoU denominator; a mean score is undefined."""


class NumericalAbort(FewsegError):
    """Training hit a non-finite loss and was aborted."""
