"""Exception hierarchy shared by every module."""


class KeyselError(Exception):
    pass


class ShapeMismatch(KeyselError, ValueError):
    pass


class AxisOutOfRange(KeyselError, IndexError):
    pass


class BadParam(KeyselError, ValueError):
    pass


class BadMagic(KeyselError, ValueError):
    pass


class DtypeUnsupported(KeyselError, ValueError):
    pass


class TruncatedFile(KeyselError, ValueError):
    pass


class KernelTooLarge(KeyselError, ValueError):
    pass


class BadOutputSize(KeyselError, ValueError):
    pass


class LabelOutOfRange(KeyselError, IndexError):
    pass


class BadHyperparam(KeyselError, ValueError):
    pass


class DivisibilityViolation(KeyselError, ValueError):
    pass


class CoordOutOfRange(KeyselError, ValueError):
    pass


class StaleCache(KeyselError, RuntimeError):
    """A backward pass was given a cache that was already consumed or outdated."""


class BadConfig(KeyselError, ValueError):
    pass


class PlacementFailure(KeyselError, RuntimeError):
    pass


class MissingFile(KeyselError, FileNotFoundError):
    pass


class BadManifest(KeyselError, ValueError):
    pass


class EmptySplit(KeyselError, ValueError):
    pass
