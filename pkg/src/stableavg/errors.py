"""Exception hierarchy; each class maps to a CLI exit code."""


class StableAvgError(Exception):
    exit_code = 1


class ParameterError(StableAvgError, ValueError):
    exit_code = 2


class ConfigError(StableAvgError):
    exit_code = 2

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ResourceError(StableAvgError):
    exit_code = 3


class NumericalError(StableAvgError):
    exit_code = 4

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
