"""Exception hierarchy. Exit codes for the CLI hang off these classes."""

from __future__ import annotations


class TssrpError(Exception):
    exit_code = 3


class ConfigError(TssrpError, ValueError):
    """Invalid configuration; ``problems`` lists every violation found."""

    exit_code = 4

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class StateError(TssrpError, RuntimeError):
    exit_code = 5


class DataError(TssrpError):
    exit_code = 6

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class ProtocolError(DataError):
    exit_code = 7


class CalibrationError(TssrpError):
    exit_code = 8
