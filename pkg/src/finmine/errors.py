"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 usage/config, 3 data, 4 numerical.
"""


class FinmineError(Exception):
    exit_code = 3


class ConfigError(FinmineError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class DataError(FinmineError):
    exit_code = 3


class MalformedContainer(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class EmptyAudio(DataError):
    pass


class ClipTooShort(DataError):
    pass


class SpectrogramTooShort(DataError):
    pass


class EmptyRecipe(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class DegenerateBatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class SingleClassDataset(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class TooFewPoints(DataError):
    # raised when more clusters or neighbours are requested than points exist
    exit_code = 2


class SingleCluster(DataError):
    pass


class UnresolvedProvenance(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class VersionMismatch(DataError):
    pass


class IOFailure(DataError):
    pass


class NumericalError(FinmineError):
    exit_code = 4


class NonFiniteValue(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass
