"""Exception taxonomy shared across the pipeline.

Every error raised by this package derives from PipelineError so callers
can catch one type at the process boundary. Configuration and usage
mistakes derive from ConfigError instead and map to a distinct exit code.
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for runtime failures inside the pipeline."""


class ConfigError(PipelineError):
    """Invalid configuration or command usage."""


class TerminalViolation(PipelineError):
    """A step was appended after the trajectory already terminated."""


class IndexGap(PipelineError):
    """Step indices must be contiguous and 1-based."""


class OutOfRange(PipelineError):
    """A step index points outside the trajectory."""


class DegeneratePair(PipelineError):
    """Preferred and rejected steps are identical; no training signal."""


class BackendUnavailable(PipelineError):
    """A policy, judge, or executor backend could not serve the request."""


class MalformedOutput(PipelineError):
    """Backend output did not parse into the expected structure."""


class ExecutorUnavailable(PipelineError):
    """The code executor could not run the requested action."""


class Timeout(PipelineError):
    """Every attempt against a remote backend timed out."""


class MissingBinding(PipelineError):
    """A template placeholder was left unbound at render time."""


class StepLimitExceeded(PipelineError):
    """Step generation hit the configured cap without terminating."""


class InvalidVerdict(PipelineError):
    """A judge verdict is inconsistent with the trajectory under review."""


class EventMismatch(PipelineError):
    """A correction event does not belong to the outcome it was paired with."""


class SerializationFailure(PipelineError):
    """A record could not be converted to or from its wire form."""


class DegenerateFit(PipelineError):
    """Not enough well-formed points to fit a growth exponent."""
