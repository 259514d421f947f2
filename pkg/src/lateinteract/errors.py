"""Exception hierarchy shared by every module."""


class LateInteractError(Exception):
    """Base class; the CLI maps these to exit code 2."""


class ZeroNormRow(LateInteractError):
    pass


class AllMasked(LateInteractError):
    pass


class DegenerateColumn(LateInteractError):
    pass


class DegenerateLevel(LateInteractError):
    pass


class ShapeMismatch(LateInteractError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class NonSquare(LateInteractError):
    pass


class AssignmentMismatch(LateInteractError):
    pass


class MissingTruth(LateInteractError):
    pass


class ConfigError(LateInteractError):
    pass


class FormatError(LateInteractError):
    """Bad magic, unsupported version, or truncated DRLE file."""


class ChecksumError(FormatError):
    pass
