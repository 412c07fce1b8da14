"""Exception types shared across the toolkit."""


class MoetuneError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MoetuneError, ValueError):
    """Operand shapes are incompatible."""


class RankError(MoetuneError, ValueError):
    """Tensor has the wrong number of dimensions (e.g. non-scalar loss)."""


class NumericError(MoetuneError, ArithmeticError):
    """A computation produced or received NaN/Inf."""


class EmptyMaskError(MoetuneError, ValueError):
    """Loss mask selects no positions."""


class VocabError(MoetuneError, ValueError):
    """Token id outside the vocabulary."""


class LengthError(MoetuneError, ValueError):
    """Sequence exceeds the maximum length."""


class ConfigError(MoetuneError, ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(MoetuneError, ValueError):
    """Input file could not be parsed."""


class RecordError(MoetuneError, ValueError):
    """A single record violates its schema (skippable in lenient mode)."""


class FormatError(MoetuneError, ValueError):
    """Serialized container has the wrong magic, version or structure."""


class IntegrityError(MoetuneError, ValueError):
    """Serialized container is structurally valid but inconsistent."""


class TrainingAborted(MoetuneError, RuntimeError):
    """Training stopped due to a non-finite loss; carries the step index."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step
