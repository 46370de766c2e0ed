"""Exception hierarchy shared by all cdi modules."""


class CdiError(Exception):
    """Base class for every error raised by this package."""


class DecodeError(CdiError, ValueError):
    """Bytes or JSON could not be decoded into the expected structure."""


class CanonicalizationError(CdiError, ValueError):
    """A value cannot be rendered as canonical JSON (floats, non-string keys...)."""


class MalformedPayload(DecodeError):
    """A signed payload decoded to something other than the expected record."""


class StatementError(CdiError, ValueError):
    """An operation statement violates its structural preconditions."""


class ChainError(CdiError):
    """The provenance chain cannot be linked or walked."""


class CycleError(ChainError):
    pass


class NoTerminalError(ChainError):
    pass


class AmbiguousTerminalError(ChainError):
    pass


class DuplicateStatementError(ChainError):
    pass


class DanglingReferenceError(ChainError):
    pass


class CertificateError(CdiError, ValueError):
    """A certificate or tool certification could not be issued."""


class CertPathError(CdiError):
    """No valid chain of trust from a tool certification to a trusted root.

    ``reason`` is one of ``no-path``, ``signature``, ``validity``, ``depth``.
    """

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class EvidenceError(CdiError, ValueError):
    """Attestation evidence does not match the key it is attached to."""


class PolicyError(DecodeError):
    """A trust policy document is structurally invalid."""


class BundleError(DecodeError):
    """A bundle document is structurally invalid."""
