"""Key derivation, CTR keystream generation and packet authentication.

All key material flows from a :class:`MasterSecret` (32-byte master key
plus a single-use 16-byte master salt).  A per-session initialisation
vector is derived as

    iv_prf = master_salt XOR session_id XOR 2**16

with every operand read as a 128-bit big-endian integer, the session id
zero-extended from 32 bits.  Running AES-256 in counter mode over the
master key with ``iv_prf`` as the first counter block yields the keystream
``ks``; its first 96 bytes split into the session encryption key, salting
key and authentication key (32 bytes each).

Payloads are encrypted with AES-256-CTR under the encryption key.  The
per-packet counter start comes from :func:`derive_packet_iv`, which has two
modes: ``SESSION_CONSTANT`` applies the salting-key formula verbatim and
therefore reuses one keystream for the whole session (kept only as a
vulnerability demonstration, see :data:`IvMode`), while the default
``PER_PACKET`` mode additionally mixes in the stream source identifier and
the 48-bit packet index so every packet gets a disjoint counter range.

Packets are authenticated encrypt-then-MAC with HMAC-SHA-256 over the
serialized header and ciphertext; the full 32-byte tag is appended.
"""

import enum
import hmac
import hashlib
import secrets
from dataclasses import dataclass

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import BadKeyLength

KEY_LEN = 32
SALT_LEN = 16
TAG_LEN = 32
_BLOCK_MASK = (1 << 128) - 1
_SESSION_ID_MAX = (1 << 32) - 1
INDEX_MASK = (1 << 48) - 1

#: The XOR constant appearing in both IV formulas.
IV_CONSTANT = 1 << 16


class IvMode(enum.Enum):
    """How the per-packet counter start is derived.

    SESSION_CONSTANT uses the bare session formula, so every packet of a
    session starts from the same counter block.  Two packets then share a
    keystream and their ciphertexts XOR to their plaintexts (a two-time
    pad).  It exists to make that weakness demonstrable and must never be
    used for real traffic; the command-line tools refuse it outside
    explicitly opted-in benchmark runs.

    PER_PACKET (the default) additionally XORs in the SSRC (shifted left
    64 bits) and the 48-bit packet index (shifted left 16 bits), giving
    each packet its own counter range.
    """

    SESSION_CONSTANT = "session-constant"
    PER_PACKET = "per-packet"


@dataclass(frozen=True)
class MasterSecret:
    """Root secret of a session: 32-byte master key, 16-byte master salt.

    The salt is single-use: it arrives in a SETUP request and must never
    be reused under the same master key, otherwise two sessions that also
    share a session id would derive identical keys.
    """

    master_key: bytes
    master_salt: bytes

    def __post_init__(self):
        if len(self.master_key) != KEY_LEN:
            raise BadKeyLength("master key must be %d bytes, got %d"
                               % (KEY_LEN, len(self.master_key)))
        if len(self.master_salt) != SALT_LEN:
            raise ValueError("master salt must be %d bytes, got %d"
                             % (SALT_LEN, len(self.master_salt)))


@dataclass(frozen=True)
class SessionKeys:
    """Derived key triple bound to a session id.

    ``encryption_key`` masks payloads, ``salting_key`` feeds the packet IV
    construction, ``authentication_key`` keys the HMAC tag.  All three are
    32 bytes and come from consecutive, non-overlapping keystream ranges.
    """

    session_id: int
    encryption_key: bytes
    salting_key: bytes
    authentication_key: bytes

    def __post_init__(self):
        _check_session_id(self.session_id)
        for name in ("encryption_key", "salting_key", "authentication_key"):
            if len(getattr(self, name)) != KEY_LEN:
                raise ValueError("%s must be %d bytes" % (name, KEY_LEN))


@dataclass
class PacketIndex:
    """Sender-side packet counter: 32-bit SSRC plus 48-bit running index.

    The low 16 bits of ``index`` are the RTP sequence number; the upper 32
    bits are the rollover counter that receivers reconstruct.  ``advance``
    increments by exactly one per packet.
    """

    ssrc: int
    index: int = 0

    def __post_init__(self):
        if not 0 <= self.ssrc <= 0xFFFFFFFF:
            raise ValueError("ssrc out of 32-bit range")
        if not 0 <= self.index <= INDEX_MASK:
            raise ValueError("index out of 48-bit range")

    @property
    def sequence_number(self) -> int:
        return self.index & 0xFFFF

    @property
    def rollover(self) -> int:
        return self.index >> 16

    def advance(self) -> None:
        self.index = (self.index + 1) & INDEX_MASK


def _check_session_id(session_id: int) -> None:
    if not 1 <= session_id <= _SESSION_ID_MAX:
        raise ValueError("session id must be a non-zero 32-bit value")


_issued_salts = set()


def fresh_master_salt() -> bytes:
    """Return a new random 16-byte master salt, never repeated in-process."""
    salt = secrets.token_bytes(SALT_LEN)
    if salt in _issued_salts:
        raise RuntimeError("random source returned a repeated master salt")
    _issued_salts.add(salt)
    return salt


def derive_iv_prf(master_salt: bytes, session_id: int) -> bytes:
    """Initial counter block for the key-derivation keystream.

    Computes master_salt XOR session_id XOR 2**16 in the 128-bit
    big-endian integer domain and re-encodes the result as 16 bytes.
    """
    if len(master_salt) != SALT_LEN:
        raise ValueError("master salt must be %d bytes" % SALT_LEN)
    _check_session_id(session_id)
    value = int.from_bytes(master_salt, "big") ^ session_id ^ IV_CONSTANT
    return value.to_bytes(SALT_LEN, "big")


def derive_session_keys(master: MasterSecret, session_id: int) -> SessionKeys:
    """Expand a master secret into the per-session key triple.

    The first 96 bytes of the counter-mode keystream over the master key,
    starting at the block from :func:`derive_iv_prf`, are split as
    encryption key, salting key, authentication key in that order.
    Deterministic: equal inputs give byte-identical keys, which is what
    lets both endpoints derive the triple independently after SETUP.
    """
    iv = derive_iv_prf(master.master_salt, session_id)
    ks = ctr_keystream(master.master_key, iv, 3 * KEY_LEN)
    return SessionKeys(
        session_id=session_id,
        encryption_key=ks[0:32],
        salting_key=ks[32:64],
        authentication_key=ks[64:96],
    )


def derive_packet_iv(salting_key: bytes, session_id: int, pkt: PacketIndex,
                     mode: IvMode = IvMode.PER_PACKET) -> bytes:
    """First counter block for one packet's payload encryption.

    Both modes start from (low 128 bits of the salting key) XOR session_id
    XOR 2**16.  PER_PACKET additionally XORs (ssrc << 64) and
    ((index & 2**48-1) << 16).  Because all per-session terms are fixed,
    any two distinct indices give counter starts at least 2**16 blocks
    apart, so counter ranges of payloads up to 64 KiB never overlap.
    """
    if len(salting_key) != KEY_LEN:
        raise ValueError("salting key must be %d bytes" % KEY_LEN)
    _check_session_id(session_id)
    value = int.from_bytes(salting_key[16:], "big") ^ session_id ^ IV_CONSTANT
    if mode is IvMode.PER_PACKET:
        value ^= pkt.ssrc << 64
        value ^= (pkt.index & INDEX_MASK) << 16
    return value.to_bytes(16, "big")


def ctr_keystream(key: bytes, iv: bytes, n_bytes: int) -> bytes:
    """AES-256-CTR keystream of ``n_bytes`` starting at counter block ``iv``.

    Counter addition wraps modulo 2**128.  The result is the concatenation
    of the cipher outputs for iv, iv+1, ... truncated to ``n_bytes``, i.e.
    the most significant n bytes of the stream.
    """
    if n_bytes < 0:
        raise ValueError("n_bytes must be non-negative")
    if n_bytes == 0:
        return b""
    enc = Cipher(algorithms.AES(key), modes.CTR(iv)).encryptor()
    return enc.update(bytes(n_bytes)) + enc.finalize()


def encrypt_payload(keys: SessionKeys, iv: bytes, plaintext: bytes) -> bytes:
    """XOR data with the keystream under the session encryption key.

    Counter mode is an involution: applying this to ciphertext with the
    same iv returns the plaintext, so it serves as decrypt_payload too.
    """
    if not plaintext:
        return b""
    enc = Cipher(algorithms.AES(keys.encryption_key), modes.CTR(iv)).encryptor()
    return enc.update(plaintext) + enc.finalize()


def compute_auth_tag(auth_key: bytes, authenticated_portion: bytes) -> bytes:
    """Full 32-byte HMAC-SHA-256 tag over header plus ciphertext."""
    return hmac.new(auth_key, authenticated_portion, hashlib.sha256).digest()


def verify_auth_tag(auth_key: bytes, authenticated_portion: bytes, tag: bytes) -> bool:
    """Constant-time tag check; returns False on mismatch, never raises."""
    expected = compute_auth_tag(auth_key, authenticated_portion)
    return hmac.compare_digest(expected, tag)
