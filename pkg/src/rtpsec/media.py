"""Frame acquisition and the encode/decode pipeline.

Frames are 24-bit RGB at one of three geometries (480p is 854x480, 720p is
1280x720, 1080p is 1920x1080).  The codec step produces the bytes that get
encrypted: RAW passes pixel data through, JPEG goes through OpenCV's
encoder at a configurable quality.  Either result can be wrapped in
standard base64, and the wrap happens after the codec and before
encryption, which inflates payloads by a third but keeps them printable.

Two synthetic sources replace container video files.  The static one
renders a fixed scene with a few slowly moving blocks, like a mounted
camera watching traffic: consecutive frames differ in a handful of pixels
and compress very evenly.  The handheld one crops a larger scene at a
jittering offset and adds sensor-like noise whose amplitude swings slowly
over time, so both inter-frame deltas and per-frame compression cost vary
the way hand-shot footage does.  Both are deterministic per seed.
"""

import base64
import binascii
import enum
import math
import os
import re
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple
from zlib import adler32, crc32

import cv2
import numpy as np

from .errors import CorruptPayload, ManifestError

RESOLUTIONS = {"480p": (854, 480), "720p": (1280, 720), "1080p": (1920, 1080)}
MEDIA_CLOCK_HZ = 90000
DEFAULT_JPEG_QUALITY = 90
DEFAULT_FPS = 30

MOTION_STATIC = "static"
MOTION_HANDHELD = "handheld"


class Codec(enum.Enum):
    RAW = "RAW"
    JPEG = "JPEG"


@dataclass
class Frame:
    """One uncompressed RGB24 frame with a 90 kHz capture timestamp."""

    width: int
    height: int
    data: bytes
    capture_ts: int = 0
    pixel_format: str = "RGB24"

    def __post_init__(self):
        if self.pixel_format != "RGB24":
            raise ValueError("only RGB24 frames are supported")
        if len(self.data) != self.width * self.height * 3:
            raise ValueError("frame data is %d bytes, want %d for %dx%d"
                             % (len(self.data), self.width * self.height * 3,
                                self.width, self.height))


@dataclass
class EncodedFrame:
    """Codec output plus enough metadata to decode it again."""

    codec: Codec
    base64_wrapped: bool
    payload: bytes
    width: int
    height: int


def frame_digest(data: bytes) -> str:
    """64-bit checksum (CRC-32 and Adler-32 halves) as 16 hex characters.

    Cheap enough to run on every frame of a stream; collision resistance
    is not a goal, packet tags already guarantee integrity.
    """
    return "%08x%08x" % (crc32(data) & 0xFFFFFFFF, adler32(data) & 0xFFFFFFFF)


def resolution_label(width: int, height: int) -> str:
    for label, (w, h) in RESOLUTIONS.items():
        if (w, h) == (width, height):
            return label
    return "%dx%d" % (width, height)


def encode_frame(frame: Frame, codec: Codec = Codec.RAW,
                 quality: int = DEFAULT_JPEG_QUALITY,
                 wrap_base64: bool = True) -> EncodedFrame:
    """Codec step, then optional base64. Encryption comes strictly after."""
    if not 1 <= quality <= 100:
        raise ValueError("JPEG quality must be in 1..100")
    if codec is Codec.RAW:
        payload = frame.data
    else:
        arr = np.frombuffer(frame.data, dtype=np.uint8)
        arr = arr.reshape(frame.height, frame.width, 3)
        ok, buf = cv2.imencode(".jpg", cv2.cvtColor(arr, cv2.COLOR_RGB2BGR),
                               [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
        if not ok:
            raise CorruptPayload("JPEG encoder refused the frame")
        payload = buf.tobytes()
    if wrap_base64:
        payload = base64.b64encode(payload)
    return EncodedFrame(codec=codec, base64_wrapped=wrap_base64,
                        payload=payload, width=frame.width, height=frame.height)


_B64_ALPHABET = (b"ABCDEFGHIJKLMNOPQRSTUVWXYZ"
                 b"abcdefghijklmnopqrstuvwxyz0123456789+/=")


def _b64decode_strict(payload: bytes) -> bytes:
    # base64.b64decode(validate=True) walks the input with a regex, which
    # on multi-megabyte frames costs more than the decode itself.  The
    # same rejections fall out of a C-speed alphabet scan, a check that
    # '=' appears only as trailing padding, and the loose decoder, which
    # still enforces length and padding.
    if payload.translate(None, _B64_ALPHABET):
        raise binascii.Error("non-alphabet character")
    pad = payload.find(b"=")
    if pad != -1 and payload[pad:].strip(b"="):
        raise binascii.Error("padding before end of data")
    return base64.b64decode(payload)


def decode_frame(encoded: EncodedFrame) -> Frame:
    """Inverse of encode_frame; exact for RAW, lossy for JPEG."""
    payload = encoded.payload
    if encoded.base64_wrapped:
        try:
            payload = _b64decode_strict(payload)
        except (binascii.Error, ValueError) as exc:
            raise CorruptPayload("bad base64: %s" % exc) from None
    if encoded.codec is Codec.RAW:
        expected = encoded.width * encoded.height * 3
        if len(payload) != expected:
            raise CorruptPayload("raw payload is %d bytes, want %d"
                                 % (len(payload), expected))
        return Frame(width=encoded.width, height=encoded.height, data=payload)
    arr = cv2.imdecode(np.frombuffer(payload, dtype=np.uint8), cv2.IMREAD_COLOR)
    if arr is None:
        raise CorruptPayload("JPEG decoder rejected the payload")
    height, width = arr.shape[:2]
    if (encoded.width or encoded.height) and (width, height) != (encoded.width,
                                                                encoded.height):
        raise CorruptPayload("decoded %dx%d, declared %dx%d"
                             % (width, height, encoded.width, encoded.height))
    rgb = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    return Frame(width=width, height=height, data=rgb.tobytes())


def _resolve(resolution) -> Tuple[int, int]:
    if isinstance(resolution, str):
        try:
            return RESOLUTIONS[resolution]
        except KeyError:
            raise ValueError("unknown resolution %r, pick one of %s"
                             % (resolution, sorted(RESOLUTIONS))) from None
    width, height = resolution
    return int(width), int(height)


class FrameSource:
    """Single-consumer iterator of frames at a fixed geometry."""

    kind = "abstract"

    def __init__(self, width: int, height: int, fps_target: int):
        self.width = width
        self.height = height
        self.fps_target = fps_target
        self.ts_step = MEDIA_CLOCK_HZ // fps_target

    def frames(self) -> Iterator[Frame]:
        raise NotImplementedError

    def __iter__(self) -> Iterator[Frame]:
        return self.frames()

    def take(self, count: int) -> List[Frame]:
        out = []
        for frame in self.frames():
            out.append(frame)
            if len(out) == count:
                break
        return out


class SyntheticSource(FrameSource):
    """Deterministic procedural frames, static-scene or handheld motion."""

    kind = "synthetic"
    _CYCLE = 48          # static block motion period
    _JITTER = 64         # handheld crop margin, pixels
    _NOISE_PERIOD = 96   # handheld noise amplitude period, frames

    def __init__(self, resolution, seed: int = 0, motion: str = MOTION_STATIC,
                 fps_target: int = DEFAULT_FPS):
        width, height = _resolve(resolution)
        super().__init__(width, height, fps_target)
        if motion not in (MOTION_STATIC, MOTION_HANDHELD):
            raise ValueError("motion must be %r or %r"
                             % (MOTION_STATIC, MOTION_HANDHELD))
        self.motion = motion
        self.seed = seed
        rng = np.random.RandomState(seed)
        if motion == MOTION_STATIC:
            self._init_static(rng)
        else:
            self._init_handheld(rng)

    def _gradient(self, rng, height, width):
        ramp_x = np.linspace(0, 255, width, dtype=np.float32)
        ramp_y = np.linspace(0, 255, height, dtype=np.float32)[:, None]
        base = np.empty((height, width, 3), dtype=np.uint8)
        phase = rng.randint(0, 255, size=3)
        for c in range(3):
            base[:, :, c] = ((ramp_x[None, :] + ramp_y + phase[c]) % 256
                             ).astype(np.uint8)
        return base

    def _init_static(self, rng):
        self._background = self._gradient(rng, self.height, self.width)
        self._blocks = []
        for _ in range(4):
            size = int(rng.randint(16, 48))
            x = int(rng.randint(0, self.width - size - 2 * self._CYCLE))
            y = int(rng.randint(0, self.height - size))
            colour = rng.randint(0, 255, size=3).astype(np.uint8)
            self._blocks.append((x, y, size, colour))

    def _init_handheld(self, rng):
        margin = self._JITTER
        big = self._gradient(rng, self.height + margin, self.width + margin)
        texture = rng.randint(0, 255, big.shape).astype(np.uint8)
        texture = cv2.GaussianBlur(texture, (0, 0), sigmaX=4)
        self._scene = cv2.addWeighted(big, 0.6, texture, 0.4, 0)
        base_noise = rng.randint(0, 24, (2, self.height, self.width, 3))
        # noise planes pre-scaled per amplitude level, ready for saturating add
        self._noise = [
            [np.clip(base_noise[j] * level, 0, 255).astype(np.uint8)
             for j in range(2)]
            for level in range(4)
        ]
        self._walk = rng

    def frames(self) -> Iterator[Frame]:
        if self.motion == MOTION_STATIC:
            return self._static_frames()
        return self._handheld_frames()

    def _static_frames(self) -> Iterator[Frame]:
        t = 0
        while True:
            arr = self._background.copy()
            step = t % self._CYCLE
            shift = int(round(self._CYCLE * (1 - math.cos(2 * math.pi * step
                                                          / self._CYCLE)) / 2))
            for x, y, size, colour in self._blocks:
                arr[y:y + size, x + shift:x + shift + size] = colour
            yield Frame(self.width, self.height, arr.tobytes(),
                        capture_ts=(t * self.ts_step) & 0xFFFFFFFF)
            t += 1

    def _noise_level(self, t: int) -> int:
        level = 1.5 + 1.5 * math.sin(2 * math.pi * t / self._NOISE_PERIOD)
        return int(round(level))

    def _handheld_frames(self) -> Iterator[Frame]:
        t = 0
        ox = oy = self._JITTER // 2
        while True:
            ox = int(np.clip(ox + self._walk.randint(-6, 7), 0, self._JITTER))
            oy = int(np.clip(oy + self._walk.randint(-6, 7), 0, self._JITTER))
            crop = self._scene[oy:oy + self.height, ox:ox + self.width]
            level = self._noise_level(t)
            if level:
                arr = cv2.add(crop, self._noise[level][t % 2])
            else:
                arr = crop.copy()
            yield Frame(self.width, self.height, arr.tobytes(),
                        capture_ts=(t * self.ts_step) & 0xFFFFFFFF)
            t += 1


def synthetic_source(resolution, seed: int = 0, motion: str = MOTION_STATIC,
                     fps_target: int = DEFAULT_FPS) -> SyntheticSource:
    return SyntheticSource(resolution, seed=seed, motion=motion,
                           fps_target=fps_target)


_MANIFEST_HEADER = re.compile(r"^resolution=(\d+)x(\d+) format=RGB24$")


class ManifestSource(FrameSource):
    """Frames streamed from files listed in a manifest.

    The manifest's first line declares geometry and format, every further
    non-empty line is a path relative to the manifest.  File sizes are
    checked up front so a bad entry fails before streaming starts.
    """

    kind = "manifest"

    def __init__(self, manifest_path: str, fps_target: int = DEFAULT_FPS):
        try:
            with open(manifest_path, "r", encoding="ascii") as fh:
                lines = [line.rstrip("\n") for line in fh]
        except OSError as exc:
            raise ManifestError("cannot read manifest: %s" % exc) from None
        if not lines:
            raise ManifestError("manifest is empty")
        match = _MANIFEST_HEADER.match(lines[0])
        if not match:
            raise ManifestError("bad manifest header: %r" % lines[0])
        width, height = int(match.group(1)), int(match.group(2))
        super().__init__(width, height, fps_target)
        root = os.path.dirname(os.path.abspath(manifest_path))
        self.paths = [os.path.join(root, line) for line in lines[1:] if line]
        if not self.paths:
            raise ManifestError("manifest lists no frames")
        expected = width * height * 3
        for path in self.paths:
            try:
                size = os.path.getsize(path)
            except OSError:
                raise ManifestError("missing frame file: %s" % path) from None
            if size != expected:
                raise ManifestError("%s is %d bytes, want %d"
                                    % (path, size, expected))

    def frames(self) -> Iterator[Frame]:
        for t, path in enumerate(self.paths):
            try:
                with open(path, "rb") as fh:
                    data = fh.read()
            except OSError as exc:
                raise ManifestError("cannot read %s: %s" % (path, exc)) from None
            if len(data) != self.width * self.height * 3:
                raise ManifestError("%s changed size while streaming" % path)
            yield Frame(self.width, self.height, data,
                        capture_ts=(t * self.ts_step) & 0xFFFFFFFF)


def manifest_source(manifest_path: str,
                    fps_target: int = DEFAULT_FPS) -> ManifestSource:
    return ManifestSource(manifest_path, fps_target=fps_target)
