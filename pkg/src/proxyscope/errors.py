"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class ProxyscopeError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(ProxyscopeError, ValueError):
    pass


class ProtocolError(ProxyscopeError):
    """The peer sent bytes that do not follow the TLS framing rules."""


class IncompleteError(ProtocolError):
    """The byte stream ended in the middle of a record or message.

    ``messages`` holds whatever was fully decoded before the cut.
    """

    def __init__(self, message: str, messages: list | None = None):
        super().__init__(message)
        self.messages = messages or []


class HandshakeAlert(ProxyscopeError):
    def __init__(self, level: int, description: int):
        super().__init__(f"TLS alert level={level} description={description}")
        self.level = level
        self.description = description

    @property
    def payload(self) -> bytes:
        return bytes([self.level, self.description])


class EmptyChainError(ProxyscopeError, ValueError):
    pass


class ParseError(ProxyscopeError, ValueError):
    def __init__(self, message: str, offset: int | None = None, block: int | None = None):
        super().__init__(message)
        self.offset = offset
        self.block = block


class UnsupportedAlgorithm(ProxyscopeError):
    pass


class RuleLoadError(ProxyscopeError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ProfileError(ProxyscopeError, ValueError):
    pass


class RejectedReport(ProxyscopeError):
    """A client report was refused; ``reason`` is a short machine-readable tag."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class RetryableError(ProxyscopeError):
    """The authoritative chain could not be obtained; the report may be resent later."""


class AggregationError(ProxyscopeError):
    pass


class PolicyError(ProxyscopeError, ValueError):
    pass
