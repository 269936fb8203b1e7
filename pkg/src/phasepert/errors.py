"""Exception hierarchy shared by every module of the toolkit."""

from __future__ import annotations


class PhasePertError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(PhasePertError, ValueError):
    pass


class InvalidParams(PhasePertError, ValueError):
    pass


class SynthesisError(PhasePertError):
    pass


class UndefinedSnrError(PhasePertError, ValueError):
    pass


class ConfigError(PhasePertError):
    pass


class TrainingError(PhasePertError):
    pass


class UnsupportedFormat(PhasePertError):
    pass


class CorruptFile(PhasePertError):
    pass


class ParseError(PhasePertError, ValueError):
    """Malformed text input. ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
