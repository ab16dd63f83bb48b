"""
Error types shared by every component.

All errors derive from AfaError and from the closest built-in exception, so callers
that only know about ValueError/KeyError/RuntimeError/OSError keep working.
"""

from typing import Optional


class AfaError(Exception):
  """Base class for all library errors."""


class ConfigurationError(AfaError, ValueError):
  """
  Invalid configuration.

  Args:
      message: Human readable description
      line: 1-based line number in the config document, when known
  """

  def __init__(self, message: str, line: Optional[int] = None):
    self.line = line
    if line is not None:
      message = f"line {line}: {message}"
    super().__init__(message)


class ValidationError(AfaError, ValueError):
  """Invalid argument value or tensor shape."""


class UnknownHeadError(AfaError, KeyError):
  """Requested task head does not exist."""

  def __str__(self) -> str:
    # KeyError quotes its argument; keep the message readable
    return str(self.args[0]) if self.args else "unknown head"


class DivergenceError(AfaError, RuntimeError):
  """Training produced a non-finite loss."""


class CheckpointError(AfaError, OSError):
  """Checkpoint or archive could not be read or is corrupt."""
