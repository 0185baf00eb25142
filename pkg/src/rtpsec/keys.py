"""Master key provisioning.

Distribution of master keys is outside this package's scope, so it only
defines the provider interface plus two simple implementations: a static
pre-shared key and a lookup file.  Both return the master key for a
``(peer identity, uri)`` query; how the key got there is the deployment's
problem.

Key file format, one entry per line::

    uri=<uri> key=<64 lowercase hex characters>

Blank lines and lines starting with ``#`` are ignored.  Key material is
never logged; the file's permissions are checked and a warning is emitted
if other users can read it.
"""

import logging
import os
import re

from .crypto import KEY_LEN
from .errors import BadKeyLength, KeyNotFound, ParseError

log = logging.getLogger(__name__)

_LINE = re.compile(r"^uri=(\S+) key=([0-9a-f]{%d})$" % (2 * KEY_LEN))


class KeyProvider:
    """Interface: map a peer identity and URI to a 32-byte master key."""

    def fetch_master_key(self, identity: str, uri: str) -> bytes:
        raise NotImplementedError


class StaticKeyProvider(KeyProvider):
    """One fixed pre-shared key for every identity and URI."""

    def __init__(self, key: bytes):
        if len(key) != KEY_LEN:
            raise BadKeyLength("master key must be %d bytes, got %d"
                               % (KEY_LEN, len(key)))
        self._key = key

    def fetch_master_key(self, identity: str, uri: str) -> bytes:
        return self._key


class FileKeyProvider(KeyProvider):
    """Master keys read once from a key file, looked up by URI."""

    def __init__(self, path: str):
        self._keys = {}
        try:
            mode = os.stat(path).st_mode
        except OSError as exc:
            raise ParseError("cannot read key file: %s" % exc) from None
        if mode & 0o004:
            log.warning("key file %s is world-readable, tighten its permissions",
                        path)
        with open(path, "r", encoding="ascii") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                match = _LINE.match(line)
                if not match:
                    raise ParseError("%s line %d does not match "
                                     "'uri=<uri> key=<64 hex>'" % (path, lineno))
                uri, hex_key = match.groups()
                self._keys[uri] = bytes.fromhex(hex_key)
        if not self._keys:
            raise ParseError("%s provisions no keys" % path)

    def fetch_master_key(self, identity: str, uri: str) -> bytes:
        try:
            return self._keys[uri]
        except KeyError:
            raise KeyNotFound("no master key provisioned for uri %r" % uri) \
                from None

    @property
    def uris(self):
        return sorted(self._keys)


def static_provider(key: bytes) -> KeyProvider:
    return StaticKeyProvider(key)


def file_provider(path: str) -> KeyProvider:
    return FileKeyProvider(path)
