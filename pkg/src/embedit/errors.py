"""Exception types shared across the package.

Every error raised by library code derives from EmbeditError so callers
(and the CLI) can distinguish domain failures from programming bugs.
"""


class EmbeditError(Exception):
    """Base class for all library errors."""

    stage: str | None = None

    def with_stage(self, stage: str) -> "EmbeditError":
        """Tag this error with the pipeline stage it surfaced in."""
        self.stage = stage
        self.args = (f"[stage:{stage}] {self.args[0] if self.args else ''}",)
        return self


class ZeroVector(EmbeditError):
    """A vector with (near-)zero norm where a direction is required."""


class DimensionMismatch(EmbeditError):
    """Vector or matrix dimensions disagree with the world configuration."""


class UnknownConcept(EmbeditError):
    """Concept id not present in the world vocabulary."""


class ConceptNotPresent(EmbeditError):
    """Edit references a concept the scene does not contain."""


class InvalidAsset(EmbeditError):
    """Asset fields violate their invariants (empty scene, bad ranges)."""


class UnknownToken(EmbeditError):
    """Instruction word outside the closed vocabulary."""


class SlotArityMismatch(EmbeditError):
    """Number of slot markers does not match the provided inputs."""


class MissingSpecialToken(EmbeditError):
    """Decoded sequence lacks a required output token."""


class ScoreOutOfRange(EmbeditError):
    """Aesthetic score outside [1, 10]."""


class MissingPair(EmbeditError):
    """Paired-embedding lookup has no entry for the requested modality."""


class NonFiniteLoss(EmbeditError):
    """Training step produced NaN or Inf; parameters were left unchanged."""


class StepOutOfRange(EmbeditError):
    """Diffusion timestep or step count outside the schedule."""


class NoImageCandidate(EmbeditError):
    """Retrieval requires at least one Image-modality candidate."""


class MalformedRecord(EmbeditError):
    """Corpus line failed to parse; carries the 1-based line number."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class EmptyCorpus(EmbeditError):
    """An operation that averages over records received none."""


class MissingCheckpoint(EmbeditError):
    """Required checkpoint (or checkpoint section) is absent."""


class BadMagic(EmbeditError):
    """File does not start with the expected magic bytes."""


class VersionUnsupported(EmbeditError):
    """File format version is newer than this build understands."""


class CrcMismatch(EmbeditError):
    """Stored CRC32 does not match the payload."""


class UsageError(EmbeditError):
    """Bad command-line arguments (exit code 1)."""
