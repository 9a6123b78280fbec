"""Exception hierarchy.

Everything raised for bad *input data* derives from :class:`DataError` so the
command line can map it to exit code 2; configuration problems use
:class:`ConfigError` (exit code 1).
"""


class NtpOwdError(Exception):
    """Base class for all package errors."""


class ConfigError(NtpOwdError, ValueError):
    pass


class DataError(NtpOwdError, ValueError):
    pass


# codec / capture
class TruncatedPacket(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class FieldOutOfRange(DataError):
    pass


class BadMagic(DataError):
    pass


class CorruptRecordHeader(DataError):
    pass


# tier classification
class InvalidPoll(DataError):
    pass


class TooFewSamples(DataError):
    pass


class NoQualifyingSamples(DataError):
    pass


# estimation
class NoConvergence(DataError):
    pass


class InsufficientObservations(DataError):
    pass


class NoEligibleClients(DataError):
    pass


class MaskDegenerate(DataError):
    pass


class NonFinite(DataError):
    pass


class DegenerateAfterHoldout(DataError):
    pass


class RankDeficientWarning(UserWarning):
    """Effective rank of the server block is below the completion rank."""


class InsufficientObservationsWarning(UserWarning):
    pass
