"""Exception types shared across the toolkit, one class per failure domain.

The CLI maps each class to a distinct exit code, so keep raising the most
specific type available.
"""


class ToolkitError(Exception):
    """Base class for all longweave errors."""


class ConfigError(ToolkitError):
    """Bad or inconsistent run configuration."""


class CorpusError(ToolkitError):
    """Unreadable corpus, malformed record, or invalid document."""


class DocumentTooShortError(CorpusError):
    """Document has fewer tokens than the requested window."""


class DecontamError(ToolkitError):
    """Invalid n-gram index parameters."""


class ParseError(ToolkitError):
    """A completion could not be split into question and answer."""

    def __init__(self, message: str, completion: str = ""):
        super().__init__(message)
        self.completion = completion


class TransportError(ToolkitError):
    """Network-level failure talking to a generation endpoint."""


class GenerationError(ToolkitError):
    """QA generation gave up after exhausting retries."""


class AssemblyError(ToolkitError):
    """Long-context assembly could not satisfy its constraints."""


class PoolExhaustedError(AssemblyError):
    """Filler pool ran out of segments before reaching the target length."""


class ProbeBuildError(ToolkitError):
    """Probe suite construction failed (pool too small, bad source record)."""


class SuiteValidationError(ToolkitError):
    """A probe example violates a suite invariant; names the invariant."""


class EvalError(ToolkitError):
    """Scoring or report assembly failed."""
