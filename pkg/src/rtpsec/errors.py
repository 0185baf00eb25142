"""Exception hierarchy shared across the package.

Every error raised by this package derives from :class:`RtpsecError`, so
callers can catch one type at the boundary.  Packet-level verification
failures are deliberately separate classes: receivers count them in
different buckets.
"""


class RtpsecError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(RtpsecError):
    """Malformed input text or bytes."""


# --- packet layer ---

class TooShort(RtpsecError):
    """Wire data is shorter than the smallest valid packet."""


class BadVersion(RtpsecError):
    """RTP version field is not 2."""


class UnsupportedHeader(ParseError):
    """Header uses features outside the supported profile (CSRC, extension)."""


class AuthFailure(RtpsecError):
    """Authentication tag did not verify; payload was not decrypted."""


class ReplayDrop(RtpsecError):
    """Packet index already seen or older than the replay window."""


# --- control plane ---

class MalformedLine(ParseError):
    """A control-protocol line does not match the grammar."""


class UnknownMethod(ParseError):
    """Request line carries a method outside the supported set."""


class MissingCSeq(ParseError):
    """Control message lacks the mandatory CSeq header."""


class Timeout(RtpsecError):
    """No data arrived within the configured deadline."""


class RemoteError(RtpsecError):
    """The peer answered a control request with a non-200 status."""

    def __init__(self, status: int, message: str = ""):
        super().__init__(message or "remote returned status %d" % status)
        self.status = status


# --- media ---

class CorruptPayload(RtpsecError):
    """Encoded frame payload cannot be decoded (bad base64 or image data)."""


class ManifestError(RtpsecError):
    """Frame manifest is inconsistent with the files on disk."""


# --- transport ---

class OversizedDatagram(RtpsecError):
    """Datagram exceeds the endpoint's maximum size."""


class SocketClosed(RtpsecError):
    """Operation attempted on a closed endpoint."""


# --- key provisioning ---

class BadKeyLength(RtpsecError):
    """Master key is not exactly 32 bytes."""


class KeyNotFound(RtpsecError):
    """No master key is provisioned for the requested URI."""


# --- bench ---

class ConfigError(RtpsecError):
    """Benchmark configuration is missing or invalid."""


class EmptyInput(RtpsecError):
    """Aggregation was asked to summarise zero records."""
