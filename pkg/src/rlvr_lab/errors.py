"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent configuration."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class UsageError(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, dump: dict | None = None):
        self.dump = dump or {}
        super().__init__(message)
