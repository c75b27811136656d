"""Exception types shared across the toolkit."""


class XpbenchError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(XpbenchError, ValueError):
    """Input violates a documented precondition (non-finite values, bad shapes, bad ranges)."""


class DegenerateLabelsError(XpbenchError, ValueError):
    """A labelled dataset contains only one class where two are required."""


class UndefinedMetricError(XpbenchError, ValueError):
    """A metric is undefined for the given inputs (e.g. constant vector, single-class truth)."""


class InsufficientClassError(XpbenchError, ValueError):
    """A class has too few members for the requested sample size."""

    def __init__(self, class_label, needed, available):
        self.class_label = class_label
        self.needed = needed
        self.available = available
        super().__init__(
            f"class {class_label} has {available} members, {needed} required"
        )


class ParseError(XpbenchError, ValueError):
    """A data file failed to parse; carries the offending row number when known."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class MissingStudentError(XpbenchError, ValueError):
    """A student referenced in one input is absent from another."""


class ProtocolError(XpbenchError, RuntimeError):
    """An external predictor violated the stdio protocol."""


class IllConditionedError(XpbenchError, RuntimeError):
    """A regression system stayed singular after ridge escalation."""


class NoExplanationError(XpbenchError, RuntimeError):
    """An explainer produced nothing to score (e.g. zero converged counterfactuals)."""


class ConfigError(XpbenchError, ValueError):
    """A run configuration document is malformed or contains unknown keys."""


class StageError(XpbenchError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")
