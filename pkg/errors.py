"""Exception hierarchy shared by the library modules and the command line.

Each class carries the process exit code the CLI returns for it and renders a
structured payload that ``run_zoom_control.main`` writes to stderr.
"""


class ZoomControlError(Exception):
    kind = "error"
    exit_code = 1

    def __init__(self, message, path=None):
        super().__init__(message)
        self.message = message
        self.path = path

    def to_payload(self):
        payload = {"error": self.kind, "message": self.message}
        if self.path is not None:
            payload["path"] = self.path
        return payload


class InputError(ZoomControlError, ValueError):
    kind = "input"
    exit_code = 2


class ConfigurationError(ZoomControlError, ValueError):
    kind = "configuration"
    exit_code = 2


class ScenarioValidationError(ZoomControlError, ValueError):
    kind = "validation"
    exit_code = 2


class StructuralError(ZoomControlError):
    kind = "structural"
    exit_code = 3


class UnsupportedSystemError(ZoomControlError):
    kind = "unsupported_system"
    exit_code = 3


class NumericError(ZoomControlError, ArithmeticError):
    kind = "numeric"
    exit_code = 4


class OutputError(ZoomControlError, OSError):
    kind = "io"
    exit_code = 4
