"""Exception hierarchy shared by every stage of the scanner."""

from __future__ import annotations


class ScanError(Exception):
    """Base class for all scanner failures.

    ``path`` is filled in by the pipeline when the failure can be attributed
    to a specific adapter file; ``offset`` is the byte offset of the failure
    inside that file when one is known.
    """

    def __init__(self, message: str, *, path: str | None = None, offset: int | None = None):
        super().__init__(message)
        self.message = message
        self.path = path
        self.offset = offset

    @property
    def kind(self) -> str:
        return type(self).__name__

    def __str__(self) -> str:
        parts = []
        if self.path is not None:
            parts.append(str(self.path))
        if self.offset is not None:
            parts.append(f"byte {self.offset}")
        prefix = ": ".join(parts)
        return f"{prefix}: {self.message}" if prefix else self.message


# safetensors container
class SafetensorsError(ScanError):
    pass


class TruncatedFile(SafetensorsError):
    pass


class MalformedHeader(SafetensorsError):
    pass


class UnsupportedDtype(SafetensorsError):
    pass


class OffsetMismatch(SafetensorsError):
    pass


class DuplicateName(SafetensorsError):
    pass


# LoRA extraction
class OrphanTensor(ScanError):
    pass


class RankMismatch(ScanError):
    pass


class NoLoraPairs(ScanError):
    pass


# spectral analysis
class InconsistentInputDim(ScanError):
    pass


class OversizedProjection(ScanError):
    pass


class NonFiniteTensor(ScanError):
    pass


class NumericalFailure(ScanError):
    pass


class DegenerateSpectrum(ScanError):
    pass


class ZeroVarianceEntries(ScanError):
    pass


# calibration
class InsufficientBank(ScanError):
    pass


class SingleClassInput(ScanError):
    pass


class EmptyClass(ScanError):
    pass


class VersionError(ScanError):
    """A bank, model or manifest file declares an unsupported major version."""


# synthetic generation
class RateOutOfSpec(ScanError):
    pass


class DegenerateBankWarning(UserWarning):
    pass


class NonConvergenceWarning(UserWarning):
    pass


class UnreadableFile(ScanError):
    pass
