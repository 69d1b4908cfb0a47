"""Exception types shared across the engine."""


class AdanpcError(Exception):
    """Base class for all engine errors.

    ``code`` is the stable machine-readable identifier emitted by the CLI
    and the HTTP service; it defaults to the class name.
    """

    code: str = "AdanpcError"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        cls.code = cls.__name__


class DimMismatch(AdanpcError):
    """Vector length does not match the declared dimension."""


class ZeroNorm(AdanpcError):
    """Vector norm too small for a well-defined direction."""


class EmptyInput(AdanpcError):
    """An operation received an empty sequence."""


class EmptyBank(AdanpcError):
    """Search or prediction requested against a bank with no usable entries."""


class LabelOutOfRange(AdanpcError):
    """Class label outside [0, num_classes)."""


class NotEnoughEntries(AdanpcError):
    """Bank too small for the requested index build."""


class NotEnoughSource(AdanpcError):
    """Fewer source points than requested neighbors."""


class ShapeMismatch(AdanpcError):
    """Parameter/gradient shapes do not line up."""


class SizeMismatch(AdanpcError):
    """Point clouds of unequal cardinality passed to the exact solver."""


class TooLarge(AdanpcError):
    """Input exceeds the exact-solver budget."""


class InfeasibleParams(AdanpcError):
    """Scenario parameters cannot be realized by the constructions."""


class BadParams(AdanpcError):
    """Invalid configuration values."""


class FormatVersionMismatch(AdanpcError):
    """Snapshot file has an unknown magic or format version."""


class ChecksumMismatch(AdanpcError):
    """Snapshot file failed CRC verification."""


class IndexStale(AdanpcError):
    """Approximate index lags far behind the bank (rebuild hint, non-fatal)."""
