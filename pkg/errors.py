"""
Exception types shared by every SeqSample module.

Each error carries a short machine code so the CLI can print a single
parsable line (``error: <code>: <message>``).
"""


class SeqSampleError(Exception):
    """Base class for all SeqSample failures."""

    code = "seqsample_error"


class ShapeError(SeqSampleError, ValueError):
    """Operand extents or ranks do not agree."""

    code = "shape_mismatch"


class NonFiniteError(SeqSampleError, ArithmeticError):
    """An operation produced NaN or Inf."""

    code = "non_finite"


class BudgetError(SeqSampleError, ValueError):
    """A sampling budget cannot be met."""

    code = "budget_infeasible"


class ConfigError(SeqSampleError, ValueError):
    """Configuration is malformed or inconsistent."""

    code = "invalid_config"


class FormatError(SeqSampleError, ValueError):
    """A binary file is truncated, corrupted or of the wrong version."""

    code = "bad_format"


class ArtifactExistsError(SeqSampleError, FileExistsError):
    """Run directories are append-only; an artifact may be written once."""

    code = "artifact_exists"


class TrainingDiverged(SeqSampleError, RuntimeError):
    """A training step produced a non-finite value."""

    code = "diverged"


class GradientCheckFailed(SeqSampleError, AssertionError):
    """An analytic gradient disagrees with central differences."""

    code = "gradcheck_failed"
