"""Pure-Python reference implementations used as an independent cross-check.

Everything in this file is written directly from the public definitions of
the algorithms (FIPS 197 for AES, FIPS 180-4 for SHA-256, RFC 2104 for
HMAC) without touching ``hashlib``, ``hmac`` or any third-party cipher
code.  The round constants and initial hash values are derived from first
principles rather than copied, so a typo cannot silently agree with a typo
in the code under test.

These implementations are naive and slow on purpose.  The test suite uses
them as an oracle on short inputs only.
"""

import functools
import math
import struct

_AES_POLY = 0x11B


def _gf_mul(a: int, b: int) -> int:
    """Multiply two elements of GF(2^8) modulo the AES polynomial."""
    acc = 0
    while b:
        if b & 1:
            acc ^= a
        a <<= 1
        if a & 0x100:
            a ^= _AES_POLY
        b >>= 1
    return acc


def _rotl8(x: int, n: int) -> int:
    return ((x << n) | (x >> (8 - n))) & 0xFF


def _build_sbox() -> list:
    box = [0x63]  # the affine constant alone, since 0 has no inverse
    for a in range(1, 256):
        inv = next(b for b in range(1, 256) if _gf_mul(a, b) == 1)
        box.append(inv ^ _rotl8(inv, 1) ^ _rotl8(inv, 2) ^ _rotl8(inv, 3) ^ _rotl8(inv, 4) ^ 0x63)
    return box


_SBOX = _build_sbox()


@functools.lru_cache(maxsize=16)
def _expand_key(key: bytes):
    """AES-256 key schedule: 60 four-byte words."""
    words = [tuple(key[4 * i:4 * i + 4]) for i in range(8)]
    rcon = 1
    for i in range(8, 60):
        temp = words[i - 1]
        if i % 8 == 0:
            rotated = temp[1:] + temp[:1]
            temp = tuple(_SBOX[b] for b in rotated)
            temp = (temp[0] ^ rcon,) + temp[1:]
            rcon = _gf_mul(rcon, 2)
        elif i % 8 == 4:
            temp = tuple(_SBOX[b] for b in temp)
        words.append(tuple(a ^ b for a, b in zip(words[i - 8], temp)))
    return tuple(words)


def _add_round_key(state, words, rnd):
    # state[r + 4c] is row r of column c, matching the FIPS 197 layout
    for c in range(4):
        word = words[4 * rnd + c]
        for r in range(4):
            state[r + 4 * c] ^= word[r]


def _shift_rows(state):
    out = [0] * 16
    for c in range(4):
        for r in range(4):
            out[r + 4 * c] = state[r + 4 * ((c + r) % 4)]
    return out


def _mix_columns(state):
    out = [0] * 16
    for c in range(4):
        s0, s1, s2, s3 = state[4 * c:4 * c + 4]
        out[4 * c + 0] = _gf_mul(s0, 2) ^ _gf_mul(s1, 3) ^ s2 ^ s3
        out[4 * c + 1] = s0 ^ _gf_mul(s1, 2) ^ _gf_mul(s2, 3) ^ s3
        out[4 * c + 2] = s0 ^ s1 ^ _gf_mul(s2, 2) ^ _gf_mul(s3, 3)
        out[4 * c + 3] = _gf_mul(s0, 3) ^ s1 ^ s2 ^ _gf_mul(s3, 2)
    return out


def aes256_block(key: bytes, block: bytes) -> bytes:
    """Encrypt a single 16-byte block under a 32-byte key."""
    if len(key) != 32 or len(block) != 16:
        raise ValueError("aes256_block wants a 32-byte key and a 16-byte block")
    words = _expand_key(key)
    state = list(block)
    _add_round_key(state, words, 0)
    for rnd in range(1, 14):
        state = [_SBOX[b] for b in state]
        state = _shift_rows(state)
        state = _mix_columns(state)
        _add_round_key(state, words, rnd)
    state = [_SBOX[b] for b in state]
    state = _shift_rows(state)
    _add_round_key(state, words, 14)
    return bytes(state)


def ctr_keystream(key: bytes, iv: bytes, n_bytes: int) -> bytes:
    """Keystream of counter blocks iv, iv+1, ... with 128-bit wraparound."""
    counter = int.from_bytes(iv, "big")
    out = bytearray()
    while len(out) < n_bytes:
        out += aes256_block(key, counter.to_bytes(16, "big"))
        counter = (counter + 1) & ((1 << 128) - 1)
    return bytes(out[:n_bytes])


def _icbrt(n: int) -> int:
    """Floor of the cube root of a non-negative integer."""
    if n < 0:
        raise ValueError("negative")
    if n == 0:
        return 0
    x = 1 << -(-n.bit_length() // 3)
    while True:
        y = (2 * x + n // (x * x)) // 3
        if y >= x:
            return x
        x = y


def _primes(count: int) -> list:
    found = []
    n = 2
    while len(found) < count:
        if all(n % p for p in found):
            found.append(n)
        n += 1
    return found


_P64 = _primes(64)
# Fractional parts of the cube roots (round constants) and square roots
# (initial state) of the first primes, as 32-bit words.
_K = [_icbrt(p << 96) & 0xFFFFFFFF for p in _P64]
_H0 = [math.isqrt(p << 64) & 0xFFFFFFFF for p in _P64[:8]]


def _ror(x: int, n: int) -> int:
    return ((x >> n) | (x << (32 - n))) & 0xFFFFFFFF


def sha256(data: bytes) -> bytes:
    """SHA-256 digest, straight from the FIPS 180-4 pseudocode."""
    h = list(_H0)
    padded = data + b"\x80" + b"\x00" * ((55 - len(data)) % 64) + (8 * len(data)).to_bytes(8, "big")
    for off in range(0, len(padded), 64):
        w = list(struct.unpack(">16I", padded[off:off + 64]))
        for i in range(16, 64):
            s0 = _ror(w[i - 15], 7) ^ _ror(w[i - 15], 18) ^ (w[i - 15] >> 3)
            s1 = _ror(w[i - 2], 17) ^ _ror(w[i - 2], 19) ^ (w[i - 2] >> 10)
            w.append((w[i - 16] + s0 + w[i - 7] + s1) & 0xFFFFFFFF)
        a, b, c, d, e, f, g, hh = h
        for i in range(64):
            t1 = hh + (_ror(e, 6) ^ _ror(e, 11) ^ _ror(e, 25)) + ((e & f) ^ (~e & g)) + _K[i] + w[i]
            t2 = (_ror(a, 2) ^ _ror(a, 13) ^ _ror(a, 22)) + ((a & b) ^ (a & c) ^ (b & c))
            hh, g, f, e = g, f, e, (d + t1) & 0xFFFFFFFF
            d, c, b, a = c, b, a, (t1 + t2) & 0xFFFFFFFF
        h = [(x + y) & 0xFFFFFFFF for x, y in zip(h, (a, b, c, d, e, f, g, hh))]
    return b"".join(x.to_bytes(4, "big") for x in h)


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    """HMAC built from its definition on top of the local sha256."""
    if len(key) > 64:
        key = sha256(key)
    key = key + b"\x00" * (64 - len(key))
    inner = sha256(bytes(b ^ 0x36 for b in key) + message)
    return sha256(bytes(b ^ 0x5C for b in key) + inner)
