"""Shared exception root for the platform."""


class ScreenforgeError(Exception):
    """Base class for all errors raised by this package.

    Every error carries a stable machine-readable ``code`` so the HTTP
    gateway can map it without string matching.
    """

    code = "INTERNAL"

    def __init__(self, message: str, **detail):
        super().__init__(message)
        self.detail = detail


class ConfigError(ScreenforgeError):
    """Invalid or missing configuration (including the deid key)."""

    code = "CONFIG"
