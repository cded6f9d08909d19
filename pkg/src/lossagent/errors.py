"""Exception hierarchy shared by every lossagent module."""

from __future__ import annotations


class LossAgentError(Exception):
    """Base class for all framework errors."""


class DimensionError(LossAgentError, ValueError):
    pass


class NumericError(LossAgentError, ValueError):
    pass


class ConfigError(LossAgentError, ValueError):
    pass


class IntegrityError(LossAgentError, ValueError):
    pass


class UnsupportedKindError(LossAgentError, TypeError):
    pass


class ParseError(LossAgentError, ValueError):
    """Raised when an agent reply carries no usable weight pattern."""


class TrainingDiverged(LossAgentError, RuntimeError):
    def __init__(self, stage: int, step: int, detail: str = "non-finite loss"):
        self.stage = stage
        self.step = step
        super().__init__(f"training diverged at stage {stage}, step {step}: {detail}")


class BackendError(LossAgentError, RuntimeError):
    """Chat or expert transport failure.

    ``category`` is one of ``timeout``, ``http_status``, ``malformed``,
    ``transport`` or ``scripted``.
    """

    def __init__(self, message: str, category: str = "transport"):
        self.category = category
        super().__init__(f"[{category}] {message}")


class LoadError(LossAgentError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
