"""Exception hierarchy. CLI exit codes key off these classes."""


class KsiError(Exception):
    """Base class for all package errors."""


class ConfigError(KsiError, ValueError):
    """Invalid configuration or usage. ``pointer`` is a JSON pointer when known."""

    def __init__(self, message, pointer=None):
        self.pointer = pointer
        if pointer:
            message = f"{pointer}: {message}"
        super().__init__(message)


class NumericalError(KsiError, ArithmeticError):
    """A linear solve or integration step failed. ``t`` names the offending time."""

    def __init__(self, message, t=None):
        self.t = t
        if t is not None:
            message = f"t={t!r}: {message}"
        super().__init__(message)


class GenerationError(NumericalError):
    """One or more chains produced non-finite states."""

    def __init__(self, failures):
        self.failures = list(failures)
        lines = [f"chain {c}: non-finite state at step {k} (t={t:.6g})" for c, k, t in self.failures[:10]]
        more = len(self.failures) - 10
        if more > 0:
            lines.append(f"... and {more} more chains")
        super().__init__(f"{len(self.failures)} chain(s) failed\n" + "\n".join(lines))


class CorruptTableError(KsiError, ValueError):
    """A drift-table file is truncated, malformed, or not a drift table."""
