"""Exception hierarchy shared by every module of the package."""


class PuditError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(PuditError, ValueError):
    pass


class InvalidAxis(PuditError, ValueError):
    pass


class EmptyMask(PuditError, ValueError):
    pass


class DisconnectedGraph(PuditError, RuntimeError):
    pass


class DomainError(PuditError, ValueError):
    pass


class NonFiniteState(PuditError, FloatingPointError):
    pass


class NonFiniteLoss(PuditError, FloatingPointError):
    pass


class MissingPrompt(PuditError, ValueError):
    pass


class InvalidMode(PuditError, ValueError):
    pass


class ExhaustedSampling(PuditError, RuntimeError):
    pass


class InapplicableTask(PuditError, ValueError):
    pass


class CorruptManifest(PuditError, ValueError):
    pass


class TruncatedBlob(PuditError, ValueError):
    pass


class ChecksumMismatch(PuditError, ValueError):
    pass


class IncompatibleShapes(PuditError, ValueError):
    pass


class FrozenParamDrift(PuditError, RuntimeError):
    pass


class CorruptCheckpoint(PuditError, ValueError):
    pass
