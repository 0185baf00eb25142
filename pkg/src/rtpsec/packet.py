"""RTP packet model: serialization, protection, replay and reassembly.

Fixed header layout (RFC 3550 section 5.1), 12 bytes, network byte order::

     0                   1                   2                   3
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |V=2|P|X|  CC   |M|     PT      |       sequence number         |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |                           timestamp                           |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |           synchronization source (SSRC) identifier            |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+

This profile pins X = 0 and CC = 0.  A protected packet on the wire is
``header || ciphertext || 32-byte tag``; the tag authenticates both the
header and the ciphertext, so splicing a payload under a different header
fails verification.

Frames larger than one datagram are fragmented: all fragments of a frame
share the frame's timestamp, and the marker bit flags the final fragment.
The receiver extends the 16-bit sequence number to a 48-bit packet index
(rollover estimation), enforces a sliding replay window, and reassembles
frames.  A frame is only emitted when its fragment range is known to be
complete from its true first fragment; a frame whose head was lost can
never surface truncated.
"""

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import crypto
from .crypto import IvMode, PacketIndex, SessionKeys, TAG_LEN
from .errors import AuthFailure, BadVersion, ReplayDrop, TooShort, UnsupportedHeader

HEADER_LEN = 12
MIN_WIRE_LEN = HEADER_LEN + TAG_LEN
DEFAULT_MTU_PAYLOAD = 1200
REPLAY_WINDOW_SIZE = 64
_HEADER_FMT = "!BBHII"
_SEQ_SPAN = 1 << 16


@dataclass
class RtpHeader:
    """Fixed 12-byte RTP header restricted to the streaming profile."""

    marker: bool
    payload_type: int
    sequence_number: int
    timestamp: int
    ssrc: int
    padding: int = 0
    extension: int = 0
    csrc_count: int = 0
    version: int = 2

    def __post_init__(self):
        if self.version != 2:
            raise ValueError("version must be 2")
        if self.extension != 0 or self.csrc_count != 0:
            raise ValueError("extensions and CSRC lists are outside this profile")
        if self.padding not in (0, 1):
            raise ValueError("padding is a single bit")
        if not 0 <= self.payload_type < 128:
            raise ValueError("payload type out of 7-bit range")
        if not 0 <= self.sequence_number < _SEQ_SPAN:
            raise ValueError("sequence number out of 16-bit range")
        if not 0 <= self.timestamp <= 0xFFFFFFFF:
            raise ValueError("timestamp out of 32-bit range")
        if not 0 <= self.ssrc <= 0xFFFFFFFF:
            raise ValueError("ssrc out of 32-bit range")


def serialize_header(h: RtpHeader) -> bytes:
    first = (h.version << 6) | (h.padding << 5) | (h.extension << 4) | h.csrc_count
    second = (int(h.marker) << 7) | h.payload_type
    return struct.pack(_HEADER_FMT, first, second,
                       h.sequence_number, h.timestamp, h.ssrc)


def parse_header(wire: bytes) -> RtpHeader:
    if len(wire) < HEADER_LEN:
        raise TooShort("need %d header bytes, got %d" % (HEADER_LEN, len(wire)))
    first, second, seq, ts, ssrc = struct.unpack(_HEADER_FMT, wire[:HEADER_LEN])
    if first >> 6 != 2:
        raise BadVersion("unsupported RTP version %d" % (first >> 6))
    if first & 0x10:
        raise UnsupportedHeader("header extension bit set")
    if first & 0x0F:
        raise UnsupportedHeader("CSRC entries present")
    return RtpHeader(marker=bool(second & 0x80), payload_type=second & 0x7F,
                     sequence_number=seq, timestamp=ts, ssrc=ssrc,
                     padding=(first >> 5) & 1)


def fragment_frame(frame_bytes: bytes, mtu_payload: int) -> List[Tuple[bytes, bool]]:
    """Split a frame into payload slices of at most mtu_payload bytes.

    The concatenation of the slices equals the frame; only the final slice
    carries marker True.  An empty frame still produces one (empty,
    marked) fragment so the receiver sees the frame at all.
    """
    if mtu_payload < 1:
        raise ValueError("mtu_payload must be at least 1")
    if not frame_bytes:
        return [(b"", True)]
    pieces = [frame_bytes[off:off + mtu_payload]
              for off in range(0, len(frame_bytes), mtu_payload)]
    last = len(pieces) - 1
    return [(piece, i == last) for i, piece in enumerate(pieces)]


def protect(keys: SessionKeys, pkt: PacketIndex, header: RtpHeader,
            payload: bytes, mode: IvMode = IvMode.PER_PACKET) -> bytes:
    """Encrypt one payload and emit the full wire packet.

    The header must already carry the packet counter's sequence number and
    SSRC; the tag is computed over the serialized header plus ciphertext.
    """
    if header.sequence_number != pkt.sequence_number:
        raise ValueError("header sequence number does not match packet index")
    if header.ssrc != pkt.ssrc:
        raise ValueError("header ssrc does not match packet index")
    head = serialize_header(header)
    iv = crypto.derive_packet_iv(keys.salting_key, keys.session_id, pkt, mode)
    ciphertext = crypto.encrypt_payload(keys, iv, payload)
    tag = crypto.compute_auth_tag(keys.authentication_key, head + ciphertext)
    return head + ciphertext + tag


def unprotect(keys: SessionKeys, wire: bytes, replay_window: "ReplayWindow",
              mode: IvMode = IvMode.PER_PACKET) -> Tuple[RtpHeader, bytes]:
    """Verify and decrypt one wire packet.

    Order of checks: parse, replay (cheap, before any crypto), tag
    verification, decryption, then the replay window is advanced.  A
    packet failing the tag never touches the window, so forgeries cannot
    poison the receiver's index state.
    """
    if len(wire) < MIN_WIRE_LEN:
        raise TooShort("packet shorter than header plus tag")
    header = parse_header(wire)
    index = replay_window.estimate_index(header.sequence_number)
    replay_window.check(index)
    authenticated, tag = wire[:-TAG_LEN], wire[-TAG_LEN:]
    if not crypto.verify_auth_tag(keys.authentication_key, authenticated, tag):
        raise AuthFailure("tag mismatch")
    iv = crypto.derive_packet_iv(keys.salting_key, keys.session_id,
                                 PacketIndex(ssrc=header.ssrc, index=index), mode)
    payload = crypto.encrypt_payload(keys, iv, wire[HEADER_LEN:-TAG_LEN])
    replay_window.accept(index)
    return header, payload


def extend_sequence(last_index: Optional[int], seq: int) -> int:
    """48-bit packet index closest to the last known index.

    Tries the rollover counter of the last index and its two neighbours
    and picks the candidate nearest to it.  With deliveries confined to
    the replay window this reconstructs the sender's index exactly, across
    any number of sequence wraps.
    """
    if last_index is None:
        return seq
    roc = last_index >> 16
    best = None
    for cand_roc in (roc - 1, roc, roc + 1):
        if not 0 <= cand_roc < (1 << 32):
            continue
        cand = (cand_roc << 16) | seq
        if best is None or abs(cand - last_index) < abs(best - last_index):
            best = cand
    return best


class ReplayWindow:
    """Sliding bitmap over the most recent packet indices.

    Tracks the highest authenticated index and a bitmap of the ``size``
    indices at and below it.  Packets older than the window or already
    marked are rejected.  ``accept`` must only be called after the tag
    verified, which :func:`unprotect` guarantees.
    """

    def __init__(self, size: int = REPLAY_WINDOW_SIZE):
        if size < 1:
            raise ValueError("window size must be positive")
        self.size = size
        self._highest: Optional[int] = None
        self._bitmap = 0
        self._mask = (1 << size) - 1
        self.last_accepted: Optional[int] = None

    def estimate_index(self, seq: int) -> int:
        return extend_sequence(self._highest, seq)

    def check(self, index: int) -> None:
        """Raise ReplayDrop if the index is stale or already seen."""
        if self._highest is None or index > self._highest:
            return
        offset = self._highest - index
        if offset >= self.size:
            raise ReplayDrop("index %d is older than the window" % index)
        if (self._bitmap >> offset) & 1:
            raise ReplayDrop("index %d already received" % index)

    def accept(self, index: int) -> None:
        if self._highest is None:
            self._highest = index
            self._bitmap = 1
        elif index > self._highest:
            self._bitmap = ((self._bitmap << (index - self._highest)) | 1) & self._mask
            self._highest = index
        else:
            self._bitmap |= 1 << (self._highest - index)
        self.last_accepted = index


class FrameBuffer:
    """Fragments of one frame, keyed by 48-bit packet index.

    ``start_index`` is the confirmed first fragment of the frame; until it
    is known the frame cannot complete, which is what prevents a frame
    whose leading fragments were lost from surfacing truncated.
    """

    def __init__(self, frame_id: Optional[int] = None,
                 expected_start: Optional[int] = None):
        self.frame_id = frame_id
        self.expected_start = expected_start
        self.fragments: Dict[int, bytes] = {}
        self.marker_index: Optional[int] = None
        self.start_index: Optional[int] = None

    def add(self, index: int, payload: bytes, marker: bool) -> bool:
        if index in self.fragments:
            return False
        self.fragments[index] = payload
        if marker and self.marker_index is None:
            self.marker_index = index
        return True

    @property
    def min_index(self) -> Optional[int]:
        return min(self.fragments) if self.fragments else None

    @property
    def max_index(self) -> Optional[int]:
        return max(self.fragments) if self.fragments else None

    @property
    def complete(self) -> bool:
        if self.start_index is None or self.marker_index is None:
            return False
        return (self.min_index == self.start_index
                and self.max_index == self.marker_index
                and len(self.fragments) == self.marker_index - self.start_index + 1)

    def assemble(self) -> bytes:
        if not self.complete:
            raise ValueError("frame is not complete")
        return b"".join(self.fragments[i]
                        for i in range(self.start_index, self.marker_index + 1))


def reassemble(buf: FrameBuffer, header: RtpHeader, payload: bytes,
               index: Optional[int] = None) -> Tuple[FrameBuffer, Optional[bytes]]:
    """Insert one fragment into a single-frame buffer.

    Returns the buffer and, exactly once, the assembled frame when it
    completes.  Without cross-frame context the start is confirmed when
    the lowest fragment reaches ``expected_start`` (index 0 by default,
    the first packet of a stream); :class:`FrameAssembler` supplies the
    cross-frame rule for everything after that.
    """
    if buf.frame_id is None:
        buf.frame_id = header.timestamp
    elif header.timestamp != buf.frame_id:
        raise ValueError("fragment timestamp does not match the buffer's frame")
    if index is None:
        index = header.sequence_number
    was_complete = buf.complete
    buf.add(index, payload, header.marker)
    if buf.start_index is None:
        expected = 0 if buf.expected_start is None else buf.expected_start
        if buf.min_index == expected:
            buf.start_index = expected
    if buf.complete and not was_complete:
        return buf, buf.assemble()
    return buf, None


def _ts_newer(a: int, b: int) -> bool:
    """True if 32-bit media timestamp a is newer than b (wraparound-safe)."""
    return a != b and ((a - b) & 0xFFFFFFFF) < 0x80000000


class FrameAssembler:
    """Reassembles a packet stream into complete frames, favouring freshness.

    Rules, applied per fragment:

    * a frame's start is confirmed when it holds index 0, or when the
      packet immediately before its lowest fragment is known to belong to
      a different (earlier) frame;
    * a frame is emitted exactly once, when fragments from the confirmed
      start through the marker fragment are all present;
    * when a frame is emitted, all frames with older timestamps are
      abandoned (counted in ``frames_dropped``), and later fragments for
      anything at or before the emitted frame count as ``stale_drops``.
    """

    _PRUNE_KEEP = 1 << 17

    def __init__(self):
        self._buffers: Dict[int, FrameBuffer] = {}
        self._seen_ts: Dict[int, int] = {}
        self._last_index: Optional[int] = None
        self._floor_ts: Optional[int] = None
        self.frames_dropped = 0
        self.stale_drops = 0

    def push(self, header: RtpHeader, payload: bytes,
             index: Optional[int] = None) -> List[bytes]:
        """Add one authenticated fragment; return the frames it completed.

        Usually the list is empty or holds one frame, but a fragment can
        complete its own frame and confirm the start of the next one in
        the same step, so it may hold two, ordered oldest first.
        """
        if index is None:
            index = extend_sequence(self._last_index, header.sequence_number)
        self._last_index = index if self._last_index is None \
            else max(self._last_index, index)
        ts = header.timestamp
        self._seen_ts[index] = ts
        if len(self._seen_ts) > 4 * self._PRUNE_KEEP:
            self._prune()

        if self._floor_ts is not None and not _ts_newer(ts, self._floor_ts):
            self.stale_drops += 1
            return []

        buf = self._buffers.get(ts)
        if buf is None:
            buf = self._buffers[ts] = FrameBuffer(frame_id=ts)
        buf.add(index, payload, header.marker)

        # This fragment may be the missing predecessor that confirms the
        # start of the next frame, so re-check every pending buffer.
        for pending in self._buffers.values():
            self._try_confirm(pending)

        completed = [b for b in self._buffers.values() if b.complete]
        completed.sort(key=lambda b: b.frame_id)
        return [self._emit(b) for b in completed]

    def _try_confirm(self, buf: FrameBuffer) -> None:
        if buf.start_index is not None:
            return
        low = buf.min_index
        if low is None:
            return
        if low == 0:
            buf.start_index = 0
            return
        prev_ts = self._seen_ts.get(low - 1)
        if prev_ts is not None and prev_ts != buf.frame_id:
            buf.start_index = low

    def _emit(self, buf: FrameBuffer) -> bytes:
        frame = buf.assemble()
        ts = buf.frame_id
        for other_ts in list(self._buffers):
            if not _ts_newer(other_ts, ts):
                if other_ts != ts:
                    self.frames_dropped += 1
                del self._buffers[other_ts]
        self._floor_ts = ts
        return frame

    def _prune(self) -> None:
        cutoff = max(self._seen_ts) - self._PRUNE_KEEP
        self._seen_ts = {i: t for i, t in self._seen_ts.items() if i >= cutoff}

    @property
    def pending_frames(self) -> int:
        return len(self._buffers)
