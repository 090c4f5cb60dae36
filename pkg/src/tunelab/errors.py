"""Exception types shared across the library."""


class TuneLabError(Exception):
    """Base class for all library errors."""


class ShapeError(TuneLabError, ValueError):
    """Operands have incompatible shapes."""


class NumericDomainError(TuneLabError, ValueError):
    """Input values outside the numeric domain of an operation."""


class LengthError(TuneLabError, ValueError):
    """A sequence exceeds the configured position budget."""


class ConfigError(TuneLabError, ValueError):
    """Invalid configuration (maps to CLI exit code 2)."""


class TransformSpecError(TuneLabError, ValueError):
    """Invalid input transform, e.g. a remap collision."""


class CorpusSizeError(TuneLabError, RuntimeError):
    """Requested corpus exceeds the configured size cap."""


class TrainingDivergedError(TuneLabError, RuntimeError):
    """Loss became non-finite during training (maps to CLI exit code 3)."""
