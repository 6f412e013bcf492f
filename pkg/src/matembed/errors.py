"""Exception types shared across the package."""


class MatEmbedError(Exception):
    """Base class for all errors raised by matembed."""


class EmptyMask(MatEmbedError, ValueError):
    pass


class DimensionMismatch(MatEmbedError, ValueError):
    pass


class ZeroVector(MatEmbedError, ValueError):
    pass


class OutOfBounds(MatEmbedError, ValueError):
    pass


class NonFiniteActivation(MatEmbedError, FloatingPointError):
    pass


class NonFiniteLoss(MatEmbedError, FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class InsufficientDistinctMaterials(MatEmbedError, ValueError):
    pass


class BadMagic(MatEmbedError, ValueError):
    pass


class VersionMismatch(MatEmbedError, ValueError):
    pass


class DuplicateId(MatEmbedError, ValueError):
    pass


class NonUnitNorm(MatEmbedError, ValueError):
    pass


class SchemaError(MatEmbedError, ValueError):
    pass


class ShapeMismatch(MatEmbedError, ValueError):
    pass
