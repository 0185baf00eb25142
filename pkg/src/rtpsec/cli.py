"""Command line interface: stream, receive, and bench subcommands.

``stream`` serves one media source: it answers control requests on a TCP
port, and once the client issues PLAY it paces protected packets to the
client's RTP port.  ``receive`` drives the other side: SETUP with a
fresh salt, PLAY, then decode and print one digest line per frame so two
processes can be compared without shipping frames.  ``bench`` runs an
experiment config and writes the CSV, summary and plot files.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
(including a receive run with authentication failures or no frames).
Session-constant IVs are insecure and exist for benchmark comparisons
only, so that mode is accepted solely by ``bench``, and only together
with ``--allow-insecure-iv``.
"""

import argparse
import dataclasses
import sys
import threading

from . import bench, control, media, packet, transport
from .control import ControlClient, ControlServer, SessionState, State
from .crypto import IvMode
from .errors import (
    ConfigError,
    KeyNotFound,
    ParseError,
    RemoteError,
    RtpsecError,
    Timeout,
)
from .keys import FileKeyProvider
from .media import Codec
from .transport import PacingPolicy, StreamConfig, StreamReceiver, UdpEndpoint


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this maps them to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print("%s: error: %s" % (self.prog, message), file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rtpsec",
                     description="Encrypted, authenticated media streaming "
                                 "over RTP-style packets.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    stream = sub.add_parser(
        "stream", help="serve a media source to one client",
        description="Serve a source: answer control requests, then send "
                    "protected packets to the client that plays.")
    stream.add_argument("--uri", required=True,
                        help="stream identifier the client must request")
    stream.add_argument("--key-file", required=True,
                        help="uri-to-master-key table (uri=<uri> key=<64 hex>)")
    stream.add_argument("--source", default="synthetic:720p",
                        help="synthetic:<resolution>[:<motion>] or "
                             "manifest:<path> (default %(default)s)")
    stream.add_argument("--host", default="127.0.0.1",
                        help="control bind address (default %(default)s)")
    stream.add_argument("--control-port", type=int,
                        default=control.DEFAULT_CONTROL_PORT,
                        help="control TCP port; 0 picks one and prints "
                             "'listening <port>' (default %(default)s)")
    stream.add_argument("--codec", choices=[c.value for c in Codec],
                        default=Codec.JPEG.value,
                        help="frame codec (default %(default)s)")
    stream.add_argument("--quality", type=int, default=media.DEFAULT_JPEG_QUALITY,
                        help="JPEG quality 1-100 (default %(default)s)")
    stream.add_argument("--no-base64", action="store_true",
                        help="send codec output without the base64 wrap")
    stream.add_argument("--fps", type=float, default=float(media.DEFAULT_FPS),
                        help="paced source rate (default %(default)s)")
    stream.add_argument("--frames", type=int, default=300,
                        help="frames to send before stopping (default %(default)s)")
    stream.add_argument("--mtu", type=int, default=packet.DEFAULT_MTU_PAYLOAD,
                        help="payload bytes per packet (default %(default)s)")
    stream.add_argument("--seed", type=int, default=1,
                        help="synthetic source seed (default %(default)s)")
    stream.add_argument("--wait", type=float, default=60.0,
                        help="seconds to wait for the client to connect and "
                             "play (default %(default)s)")

    receive = sub.add_parser(
        "receive", help="play a stream and verify it",
        description="Connect to a stream server, play, decode, and print "
                    "one digest line per frame plus a final summary.")
    receive.add_argument("--uri", required=True,
                         help="stream identifier to request")
    receive.add_argument("--key-file", required=True,
                         help="uri-to-master-key table (uri=<uri> key=<64 hex>)")
    receive.add_argument("--server", default="127.0.0.1",
                         help="control server address (default %(default)s)")
    receive.add_argument("--control-port", type=int,
                         default=control.DEFAULT_CONTROL_PORT,
                         help="control TCP port (default %(default)s)")
    receive.add_argument("--rtp-port", type=int, default=transport.DEFAULT_RTP_PORT,
                         help="local RTP port; 0 picks one (default %(default)s)")
    receive.add_argument("--codec", choices=[c.value for c in Codec],
                         default=Codec.JPEG.value,
                         help="codec the sender uses (default %(default)s)")
    receive.add_argument("--no-base64", action="store_true",
                         help="sender does not base64-wrap payloads")
    receive.add_argument("--resolution", choices=sorted(media.RESOLUTIONS),
                         help="frame geometry; required for RAW")
    receive.add_argument("--frames", type=int, default=0,
                         help="stop after this many frames; 0 means until "
                              "idle (default %(default)s)")
    receive.add_argument("--idle-timeout", type=float, default=2.0,
                         help="seconds of silence that end the run "
                              "(default %(default)s)")

    bench_cmd = sub.add_parser(
        "bench", help="run a benchmark config",
        description="Run the timing and FPS experiments described by a "
                    "key=value config file; write CSV, summary and "
                    "plot-ready TSV files.")
    bench_cmd.add_argument("--config", required=True,
                           help="experiment config file")
    bench_cmd.add_argument("--out", default="bench-out",
                           help="output directory (default %(default)s)")
    bench_cmd.add_argument("--iv-mode", choices=[m.value for m in IvMode],
                           help="override the config's IV mode")
    bench_cmd.add_argument("--allow-insecure-iv", action="store_true",
                           help="permit the session-constant IV mode, which "
                                "reuses a keystream and is insecure; "
                                "benchmarking only")
    return parser


def _parse_source(spec: str, seed: int, fps: float) -> media.FrameSource:
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        resolution, _, motion = rest.partition(":")
        resolution = resolution or "720p"
        motion = motion or media.MOTION_STATIC
        if resolution not in media.RESOLUTIONS:
            raise ConfigError("unknown resolution %r in --source" % resolution)
        if motion not in (media.MOTION_STATIC, media.MOTION_HANDHELD):
            raise ConfigError("unknown motion %r in --source" % motion)
        return media.synthetic_source(resolution, seed=seed, motion=motion,
                                      fps_target=max(1, int(fps)))
    if kind == "manifest":
        if not rest:
            raise ConfigError("--source manifest: needs a path")
        return media.manifest_source(rest, fps_target=max(1, int(fps)))
    raise ConfigError("unknown source kind %r" % kind)


class _SessionWatch:
    """Bridges control transitions into the streaming loop."""

    def __init__(self):
        self.playing = threading.Event()
        self.done = threading.Event()
        self.state = SessionState()
        self.peer = None

    def observer(self, old, new, request, peer):
        self.state = new
        self.peer = peer
        if new.state is State.PLAYING:
            self.playing.set()
        else:
            self.playing.clear()
        if old.state is not State.INIT and new.state is State.INIT:
            self.done.set()


class _LiveSession:
    """SessionState view that always reflects the watch's latest state."""

    def __init__(self, watch: _SessionWatch):
        self._watch = watch

    @property
    def state(self):
        return self._watch.state.state

    @property
    def keys(self):
        return self._watch.state.keys


def _cmd_stream(args) -> int:
    source = _parse_source(args.source, args.seed, args.fps)
    provider = FileKeyProvider(args.key_file)
    watch = _SessionWatch()
    server = ControlServer(provider, host=args.host, port=args.control_port,
                           observer=watch.observer)
    if args.control_port == 0:
        print("listening %d" % server.port, flush=True)

    def serve():
        try:
            server.serve_one(timeout=args.wait)
        except Timeout:
            pass
        finally:
            watch.done.set()
            watch.playing.set()

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()

    config = StreamConfig(codec=Codec(args.codec), quality=args.quality,
                          wrap_base64=not args.no_base64,
                          mtu_payload=args.mtu)
    endpoint = None
    exhausted = False

    def frames_gen():
        nonlocal exhausted
        for frame in source:
            yield frame
        exhausted = True

    frames_iter = frames_gen()
    sent = 0
    try:
        while sent < args.frames and not exhausted:
            if not watch.playing.wait(timeout=args.wait):
                break
            if watch.done.is_set():
                break
            if endpoint is None:
                endpoint = UdpEndpoint(
                    max_datagram=max(transport.DEFAULT_MAX_DATAGRAM,
                                     args.mtu + 44))
                endpoint.connect(watch.peer, watch.state.rtp_port)
            live = _LiveSession(watch)
            try:
                records = transport.stream_frames(
                    frames_iter, live, endpoint,
                    pacing=PacingPolicy(target_fps=args.fps),
                    config=config, max_frames=args.frames - sent)
            except ValueError:
                continue
            sent += len(records)
        print("sent %d frames" % sent, flush=True)
    finally:
        if endpoint is not None:
            endpoint.close()
        server.close()
        thread.join(timeout=5)
    if sent == 0:
        print("no client played the stream", file=sys.stderr)
        return 2
    return 0


def _cmd_receive(args) -> int:
    codec = Codec(args.codec)
    if codec is Codec.RAW and not args.resolution:
        print("receive: --resolution is required for RAW", file=sys.stderr)
        return 1
    provider = FileKeyProvider(args.key_file)
    endpoint = UdpEndpoint(bind_host="0.0.0.0", bind_port=args.rtp_port,
                           max_datagram=transport.UDP_MAX_DATAGRAM)
    client = ControlClient.connect(args.server, args.control_port, provider,
                                   timeout=10.0)
    expected = media.RESOLUTIONS[args.resolution] if args.resolution else None

    def print_frame(frame, arrival_s):
        print("frame ts=%d bytes=%d digest=%s"
              % (frame.capture_ts, len(frame.data),
                 media.frame_digest(frame.data)), flush=True)

    try:
        _, keys = client.setup(args.uri, endpoint.local_port)
        receiver = StreamReceiver(keys, config=StreamConfig(
            codec=codec, wrap_base64=not args.no_base64),
            on_frame=print_frame, expected_resolution=expected)
        client.play()
        receiver.run(endpoint, max_frames=args.frames or None,
                     idle_timeout=args.idle_timeout)
        try:
            client.teardown()
        except (RtpsecError, OSError):
            pass
    finally:
        client.close()
        endpoint.close()
    drops = receiver.assembler.frames_dropped
    print("summary: frames_ok=%d auth_failures=%d drops=%d"
          % (receiver.frames_ok, receiver.auth_failures, drops), flush=True)
    if receiver.auth_failures > 0 or receiver.frames_ok == 0:
        return 2
    return 0


def _cmd_bench(args) -> int:
    config = bench.BenchConfig.from_file(args.config)
    if args.iv_mode is not None:
        config = dataclasses.replace(config, iv_mode=IvMode(args.iv_mode))
    if config.iv_mode is IvMode.SESSION_CONSTANT and not args.allow_insecure_iv:
        print("bench: session-constant IVs reuse a keystream; pass "
              "--allow-insecure-iv to measure them anyway", file=sys.stderr)
        return 1
    result = bench.run_experiment(config, args.out)
    print(bench.summary_table(result.summary))
    print("wrote %s" % result.csv_path)
    for path in result.plot_paths:
        print("wrote %s" % path)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "stream":
            return _cmd_stream(args)
        if args.command == "receive":
            return _cmd_receive(args)
        return _cmd_bench(args)
    except (ConfigError, ParseError, KeyNotFound) as exc:
        print("%s: %s" % (args.command, exc), file=sys.stderr)
        return 1
    except RemoteError as exc:
        print("%s: server answered %d" % (args.command, exc.status),
              file=sys.stderr)
        return 2
    except (RtpsecError, OSError) as exc:
        print("%s: %s" % (args.command, exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
