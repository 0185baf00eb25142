"""Datagram transport: endpoints, pacing, and the streaming pipeline.

Two channel endpoints satisfy the same duck type (``send``, ``recv``,
``close``, ``max_datagram``): a real unicast UDP socket and an in-process
simulated channel that routes every datagram through a fault model.  On
top of them sit the sender pipeline (encode, fragment, protect, send,
with per-stage timing) and the receiver pipeline (unprotect, reassemble,
decode), plus the sliding-window FPS bookkeeping the benchmarks use.

There is no RTCP and no feedback loop; the sending rate is open-loop
pacing driven by the source frame rate.
"""

import random
import secrets
import socket
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

from . import crypto, media, netsim, packet
from .control import SessionState, State
from .crypto import IvMode, SessionKeys
from .errors import (
    CorruptPayload,
    OversizedDatagram,
    ParseError,
    ReplayDrop,
    AuthFailure,
    SocketClosed,
    Timeout,
)
from .media import Codec
from .netsim import FaultModel

UDP_MAX_DATAGRAM = 65507
DEFAULT_MAX_DATAGRAM = 1452
DEFAULT_RTP_PORT = 5004
RECV_BUFFER_BYTES = 1 << 25
# Not exposed by every Python build even where the kernel supports it.
_SO_RCVBUFFORCE = getattr(socket, "SO_RCVBUFFORCE", 33)
ZERO_TAG = bytes(packet.TAG_LEN)


class UdpEndpoint:
    """Unicast UDP endpoint; one datagram carries exactly one packet."""

    kind = "udp"

    def __init__(self, bind_host: str = "127.0.0.1", bind_port: int = 0,
                 max_datagram: int = DEFAULT_MAX_DATAGRAM):
        if not 1 <= max_datagram <= UDP_MAX_DATAGRAM:
            raise ValueError("max_datagram must be in [1, %d]" % UDP_MAX_DATAGRAM)
        self.max_datagram = max_datagram
        self.remote: Optional[Tuple[str, int]] = None
        self.last_peer: Optional[Tuple[str, int]] = None
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        # A sender can burst a whole frame's fragments faster than the
        # reader thread gets scheduled, so ask for a deep receive queue.
        # SO_RCVBUFFORCE ignores rmem_max when we are privileged; fall
        # back to the clamped SO_RCVBUF when we are not.
        try:
            self._sock.setsockopt(socket.SOL_SOCKET, _SO_RCVBUFFORCE,
                                  RECV_BUFFER_BYTES)
        except (PermissionError, OSError):
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF,
                                  RECV_BUFFER_BYTES)
        self._sock.bind((bind_host, bind_port))
        self._closed = False

    @property
    def local_address(self) -> Tuple[str, int]:
        return self._sock.getsockname()[:2]

    @property
    def local_port(self) -> int:
        return self.local_address[1]

    def connect(self, host: str, port: int) -> None:
        self.remote = (host, port)

    def send(self, datagram: bytes,
             addr: Optional[Tuple[str, int]] = None) -> None:
        if self._closed:
            raise SocketClosed("endpoint is closed")
        if len(datagram) > self.max_datagram:
            raise OversizedDatagram("datagram of %d bytes exceeds limit %d"
                                    % (len(datagram), self.max_datagram))
        target = addr or self.remote
        if target is None:
            raise ValueError("no destination address")
        self._sock.sendto(datagram, target)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        if self._closed:
            raise SocketClosed("endpoint is closed")
        self._sock.settimeout(timeout)
        try:
            datagram, peer = self._sock.recvfrom(65535)
        except socket.timeout:
            raise Timeout("no datagram within %s s" % timeout) from None
        except OSError:
            raise SocketClosed("socket error while receiving") from None
        self.last_peer = peer
        return datagram

    def close(self) -> None:
        self._closed = True
        self._sock.close()


class SimulatedChannel:
    """Loopback channel that schedules every datagram through a FaultModel.

    Datagrams pile up on send and are pushed through the simulator when
    recv drains them, using one generator stream across batches so the
    behaviour matches a single offline ``netsim.simulate`` run.
    """

    kind = "simulated"

    def __init__(self, model: FaultModel,
                 max_datagram: int = DEFAULT_MAX_DATAGRAM):
        self.model = model
        self.max_datagram = max_datagram
        self._rng = random.Random(model.seed)
        self._pending: List[bytes] = []
        self._queue: List[bytes] = []
        self._next = 0
        self._sent = 0
        self._closed = False

    def send(self, datagram: bytes,
             addr: Optional[Tuple[str, int]] = None) -> None:
        if self._closed:
            raise SocketClosed("channel is closed")
        if len(datagram) > self.max_datagram:
            raise OversizedDatagram("datagram of %d bytes exceeds limit %d"
                                    % (len(datagram), self.max_datagram))
        self._pending.append(datagram)

    def _flush(self) -> None:
        if not self._pending:
            return
        schedule = netsim.simulate(self._pending, self.model, rng=self._rng,
                                   first_index=self._sent)
        self._sent += len(self._pending)
        self._pending.clear()
        self._queue.extend(datagram for datagram, _ in schedule)

    def recv(self, timeout: Optional[float] = None) -> bytes:
        if self._closed:
            raise SocketClosed("channel is closed")
        self._flush()
        if self._next >= len(self._queue):
            raise Timeout("simulated channel drained")
        datagram = self._queue[self._next]
        self._next += 1
        return datagram

    def close(self) -> None:
        self._closed = True


@dataclass(frozen=True)
class PacingPolicy:
    """Open-loop schedule: frame k may leave (k+1)/target_fps after start."""

    target_fps: float
    burst: int = 64

    def __post_init__(self):
        if not self.target_fps > 0:
            raise ValueError("target_fps must be positive")
        if self.burst < 1:
            raise ValueError("burst must be at least 1")


@dataclass
class StreamConfig:
    codec: Codec = Codec.JPEG
    quality: int = media.DEFAULT_JPEG_QUALITY
    wrap_base64: bool = True
    mtu_payload: int = packet.DEFAULT_MTU_PAYLOAD
    secured: bool = True
    iv_mode: IvMode = IvMode.PER_PACKET
    payload_type: int = 96


@dataclass
class MetricsRecord:
    """Per-frame timing decomposition, all durations in microseconds."""

    frame_index: int
    resolution: str
    codec: str
    secured: bool
    t_encode_us: float
    t_encrypt_us: float
    t_tag_us: float
    t_total_us: float
    payload_bytes: int


@dataclass
class FpsSample:
    window_start_ts: float
    frames_in_window: int
    fps: float


class FrameSender:
    """Encodes, fragments, protects and sends frames, timing each stage.

    In unsecured mode the encrypt and tag stages become identity
    operations with the same data movement (a payload copy, and the
    header-plus-payload join the tag would hash) so the secured run
    differs only by the cryptography.
    """

    def __init__(self, session: SessionState, endpoint,
                 config: Optional[StreamConfig] = None,
                 ssrc: Optional[int] = None):
        self.config = config or StreamConfig()
        self.endpoint = endpoint
        self.keys: Optional[SessionKeys] = session.keys
        if self.config.secured and self.keys is None:
            raise ValueError("secured streaming needs session keys")
        self.index = crypto.PacketIndex(
            ssrc=secrets.randbits(32) if ssrc is None else ssrc, index=0)
        self.datagrams_sent = 0

    def send_frame(self, frame: media.Frame, frame_index: int,
                   burst: Optional[int] = None) -> MetricsRecord:
        cfg = self.config
        t0 = time.perf_counter_ns()
        encoded = media.encode_frame(frame, cfg.codec, quality=cfg.quality,
                                     wrap_base64=cfg.wrap_base64)
        t1 = time.perf_counter_ns()
        fragments = packet.fragment_frame(encoded.payload, cfg.mtu_payload)
        encrypt_ns = 0
        tag_ns = 0
        timestamp = frame.capture_ts & 0xFFFFFFFF
        for n, (chunk, last) in enumerate(fragments):
            header = packet.RtpHeader(
                marker=last, payload_type=cfg.payload_type,
                sequence_number=self.index.sequence_number,
                timestamp=timestamp, ssrc=self.index.ssrc)
            head = packet.serialize_header(header)
            e0 = time.perf_counter_ns()
            if cfg.secured:
                iv = crypto.derive_packet_iv(self.keys.salting_key,
                                             self.keys.session_id,
                                             self.index, cfg.iv_mode)
                body = crypto.encrypt_payload(self.keys, iv, chunk)
                e1 = time.perf_counter_ns()
                tag = crypto.compute_auth_tag(self.keys.authentication_key,
                                              head + body)
            else:
                body = bytes(chunk)
                e1 = time.perf_counter_ns()
                _ = head + body
                tag = ZERO_TAG
            e2 = time.perf_counter_ns()
            encrypt_ns += e1 - e0
            tag_ns += e2 - e1
            self.endpoint.send(head + body + tag)
            self.index.advance()
            self.datagrams_sent += 1
            if burst is not None and (n + 1) % burst == 0:
                time.sleep(0)
        total_ns = time.perf_counter_ns() - t0
        return MetricsRecord(
            frame_index=frame_index,
            resolution=media.resolution_label(frame.width, frame.height),
            codec=cfg.codec.value,
            secured=cfg.secured,
            t_encode_us=(t1 - t0) / 1000.0,
            t_encrypt_us=encrypt_ns / 1000.0,
            t_tag_us=tag_ns / 1000.0,
            t_total_us=total_ns / 1000.0,
            payload_bytes=len(encoded.payload),
        )


def stream_frames(source, session: SessionState, endpoint,
                  pacing: Optional[PacingPolicy] = None,
                  config: Optional[StreamConfig] = None,
                  max_frames: Optional[int] = None,
                  ssrc: Optional[int] = None) -> List[MetricsRecord]:
    """Send a source over an endpoint; returns one record per frame.

    The session must be Playing when called; streaming stops early if it
    leaves that state (PAUSE or TEARDOWN processed concurrently).  With a
    pacing policy, frame k is released no earlier than (k+1)/target_fps
    seconds after the first byte of the run, which makes n frames at the
    source rate occupy at least n/target_fps seconds of wall time.
    """
    if session.state is not State.PLAYING:
        raise ValueError("session is not Playing")
    sender = FrameSender(session, endpoint, config=config, ssrc=ssrc)
    records: List[MetricsRecord] = []
    start = time.perf_counter()
    for i, frame in enumerate(source):
        if max_frames is not None and i >= max_frames:
            break
        if session.state is not State.PLAYING:
            break
        if pacing is not None:
            release = start + (i + 1) / pacing.target_fps
            while True:
                now = time.perf_counter()
                if now >= release:
                    break
                time.sleep(release - now)
        records.append(sender.send_frame(
            frame, i, burst=pacing.burst if pacing else None))
    return records


class StreamReceiver:
    """Receives datagrams, rebuilds frames, and keeps arrival statistics.

    ``on_frame(frame, arrival_s)`` is invoked for every decoded frame;
    without a callback the frames are collected on ``self.frames``.
    Counters survive the run: ``auth_failures``, ``replay_drops``,
    ``parse_errors``, ``corrupt_frames``, and the assembler's drop
    counts.
    """

    def __init__(self, keys: Optional[SessionKeys],
                 config: Optional[StreamConfig] = None,
                 on_frame: Optional[Callable[[media.Frame, float], None]] = None,
                 expected_resolution: Optional[Tuple[int, int]] = None):
        self.config = config or StreamConfig()
        if self.config.secured and keys is None:
            raise ValueError("secured receiving needs session keys")
        self.keys = keys
        self.on_frame = on_frame
        self.expected_resolution = expected_resolution
        self.assembler = packet.FrameAssembler()
        self.window = packet.ReplayWindow()
        self.frames: List[Tuple[float, media.Frame]] = []
        self.arrival_times: List[float] = []
        self.auth_failures = 0
        self.replay_drops = 0
        self.parse_errors = 0
        self.corrupt_frames = 0
        self.frames_ok = 0

    def push_datagram(self, wire: bytes,
                      arrival_s: Optional[float] = None) -> List[media.Frame]:
        if arrival_s is None:
            arrival_s = time.perf_counter()
        try:
            if self.config.secured:
                header, payload = packet.unprotect(self.keys, wire, self.window,
                                                   self.config.iv_mode)
                index = self.window.last_accepted
            else:
                if len(wire) < packet.MIN_WIRE_LEN:
                    raise ParseError("datagram shorter than a packet")
                header = packet.parse_header(wire)
                payload = wire[packet.HEADER_LEN:-packet.TAG_LEN]
                index = None
        except AuthFailure:
            self.auth_failures += 1
            return []
        except ReplayDrop:
            self.replay_drops += 1
            return []
        except ParseError:
            self.parse_errors += 1
            return []
        decoded: List[media.Frame] = []
        for blob in self.assembler.push(header, payload, index=index):
            frame = self._decode(blob, header)
            if frame is None:
                continue
            decoded.append(frame)
            self.frames_ok += 1
            self.arrival_times.append(arrival_s)
            if self.on_frame is not None:
                self.on_frame(frame, arrival_s)
            else:
                self.frames.append((arrival_s, frame))
        return decoded

    def _decode(self, blob: bytes, header: packet.RtpHeader):
        width, height = self.expected_resolution or (0, 0)
        encoded = media.EncodedFrame(
            codec=self.config.codec, base64_wrapped=self.config.wrap_base64,
            payload=blob, width=width, height=height)
        try:
            frame = media.decode_frame(encoded)
        except CorruptPayload:
            self.corrupt_frames += 1
            return None
        frame.capture_ts = header.timestamp
        return frame

    def run(self, endpoint, max_frames: Optional[int] = None,
            idle_timeout: float = 1.0) -> int:
        """Drain an endpoint until idle or max_frames; returns frames_ok."""
        while max_frames is None or self.frames_ok < max_frames:
            try:
                wire = endpoint.recv(timeout=idle_timeout)
            except Timeout:
                break
            except SocketClosed:
                break
            self.push_datagram(wire)
        return self.frames_ok


def fps_samples(arrival_times: List[float], window_s: float = 1.0,
                step_s: float = 0.25) -> List[FpsSample]:
    """Sliding-window frame rate over a run's arrival timestamps.

    Windows of window_s seconds advance by step_s from the first arrival;
    only windows fully inside the observed span are reported, so runs
    shorter than one window yield no samples.
    """
    if not arrival_times:
        return []
    times = sorted(arrival_times)
    first, last = times[0], times[-1]
    samples: List[FpsSample] = []
    k = 0
    while first + k * step_s + window_s <= last + 1e-9:
        lo = first + k * step_s
        hi = lo + window_s
        count = sum(1 for t in times if lo <= t < hi)
        samples.append(FpsSample(window_start_ts=lo, frames_in_window=count,
                                 fps=count / window_s))
        k += 1
    return samples
