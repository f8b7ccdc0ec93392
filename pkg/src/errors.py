"""
Simulator Exceptions

One hierarchy for every failure the protocol can report. Argument errors
(bad dimensions, negative scales) stay plain ValueError.
"""

from typing import Optional


class SimulatorError(Exception):
    """Base class for all simulator errors"""


class ParseError(SimulatorError, ValueError):
    """A dataset line could not be parsed"""

    def __init__(self, path: str, line_number: int, line: str, reason: str):
        self.path = path
        self.line_number = line_number
        self.line = line
        self.reason = reason
        super().__init__(f"{path}:{line_number}: {reason}: {line!r}")


class EmptyDatasetError(SimulatorError, ValueError):
    """Ingestion or filtering left no interactions"""


class NumericError(SimulatorError, ArithmeticError):
    """Non-finite value at an API boundary"""


class DivergenceError(NumericError):
    """Local training produced a NaN loss"""


class ProtocolError(SimulatorError, RuntimeError):
    """An actor received or produced a message that breaks the protocol"""


class RoundAbortedError(SimulatorError, RuntimeError):
    """A round failed; the world keeps its pre-round state"""

    def __init__(self, round_index: int, cause: Exception):
        self.round_index = round_index
        self.cause = cause
        super().__init__(f"round {round_index} aborted: {cause}")


class ConfigError(SimulatorError, ValueError):
    """Experiment configuration is invalid"""

    def __init__(self, violations: list[str], source: Optional[str] = None):
        self.violations = violations
        self.source = source
        where = f" ({source})" if source else ""
        super().__init__(f"invalid configuration{where}:\n  " + "\n  ".join(violations))
