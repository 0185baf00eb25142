"""Benchmark harness: timing decomposition and FPS overhead experiments.

An experiment is described by a flat key=value config file and runs the
full sender/receiver pipeline in-process, either over real loopback UDP
or through the fault simulator.  For every (resolution, codec, secured)
cell it emits one CSV row per frame with the per-stage timings from the
sender, then aggregates mean/p50/p95 per cell, mean FPS, and the
secured-minus-unsecured FPS delta with its standard error.

Two run shapes exist.  Unpaced runs (``paced = off``) drive the pipeline
in lockstep at full speed, so FPS reflects what the pipeline can sustain;
paced runs (``paced = on``) release frames at the source rate from a
second thread and show what security costs at that rate.  Trace runs are
always unpaced and sweep the static and handheld synthetic sources to
expose how source complexity moves the FPS trace.

Config keys and defaults::

    resolutions = 480p,720p,1080p   comma list from {480p,720p,1080p}
    codecs = RAW,JPEG               comma list from {RAW,JPEG}
    secured = both                  on | off | both
    frames = 300                    frames per cell
    warmup = 30                     frames excluded from aggregates
    seed = 1                        synthetic source + fault seed base
    fps = 30                        source rate for paced runs
    quality = 90                    JPEG quality
    base64 = on                     wrap codec output in base64
    mtu = 1200                      payload bytes per packet
    motion = static                 matrix source kind: static | handheld
    paced = off                     pace matrix runs at `fps`
    traces = on                     run the static/handheld trace pair
    trace_frames = 600              frames per trace run
    trace_resolution = 720p
    trace_codec = JPEG
    iv_mode = per-packet            per-packet | session-constant
    loss_prob = 0                   fault model; all zero means loopback
    dup_prob = 0
    corrupt_prob = 0
    reorder_window = 0
    delay_min_ms = 0
    delay_max_ms = 0
    fault_seed = 0
"""

import csv
import hashlib
import itertools
import math
import os
import statistics
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import crypto, media, transport
from .crypto import IvMode
from .errors import ConfigError, EmptyInput, Timeout
from .media import Codec
from .netsim import FaultModel
from .transport import (
    FpsSample,
    FrameSender,
    MetricsRecord,
    PacingPolicy,
    SimulatedChannel,
    StreamConfig,
    StreamReceiver,
    UdpEndpoint,
    fps_samples,
    stream_frames,
)
from .control import SessionState, State

CSV_COLUMNS = ("frame", "resolution", "codec", "secured", "t_encode_us",
               "t_encrypt_us", "t_tag_us", "t_total_us", "payload_bytes")
CSV_NAME = "metrics.csv"
SUMMARY_NAME = "summary.txt"
PLOT_FILES = ("time_by_resolution.tsv", "fps_by_resolution_jpeg.tsv",
              "fps_by_resolution_raw.tsv", "fps_trace_static.tsv",
              "fps_trace_handheld.tsv")
MAX_MTU_PAYLOAD = transport.UDP_MAX_DATAGRAM - 44

_RES_ORDER = {"480p": 0, "720p": 1, "1080p": 2}

_DEFAULTS = {
    "resolutions": "480p,720p,1080p",
    "codecs": "RAW,JPEG",
    "secured": "both",
    "frames": "300",
    "warmup": "30",
    "seed": "1",
    "fps": "30",
    "quality": "90",
    "base64": "on",
    "mtu": "1200",
    "motion": media.MOTION_STATIC,
    "paced": "off",
    "traces": "on",
    "trace_frames": "600",
    "trace_resolution": "720p",
    "trace_codec": "JPEG",
    "iv_mode": IvMode.PER_PACKET.value,
    "loss_prob": "0",
    "dup_prob": "0",
    "corrupt_prob": "0",
    "reorder_window": "0",
    "delay_min_ms": "0",
    "delay_max_ms": "0",
    "fault_seed": "0",
}


def parse_config_text(text: str) -> Dict[str, str]:
    """Flat key=value lines; '#' comments and blank lines are ignored."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError("line %d: expected key=value, got %r"
                              % (lineno, raw))
        key = key.strip()
        if key not in _DEFAULTS:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
        if key in values:
            raise ConfigError("line %d: duplicate key %r" % (lineno, key))
        values[key] = value.strip()
    return values


def _bool_key(key: str, value: str) -> bool:
    if value == "on":
        return True
    if value == "off":
        return False
    raise ConfigError("%s must be on or off, got %r" % (key, value))


def _number(key: str, value: str, cast):
    try:
        return cast(value)
    except ValueError:
        raise ConfigError("%s must be a number, got %r" % (key, value)) from None


@dataclass
class BenchConfig:
    resolutions: List[str] = field(default_factory=lambda: ["480p", "720p", "1080p"])
    codecs: List[Codec] = field(default_factory=lambda: [Codec.RAW, Codec.JPEG])
    secured_modes: List[bool] = field(default_factory=lambda: [True, False])
    frames: int = 300
    warmup: int = 30
    seed: int = 1
    fps: float = 30.0
    quality: int = 90
    wrap_base64: bool = True
    mtu_payload: int = 1200
    motion: str = media.MOTION_STATIC
    paced: bool = False
    traces: bool = True
    trace_frames: int = 600
    trace_resolution: str = "720p"
    trace_codec: Codec = Codec.JPEG
    iv_mode: IvMode = IvMode.PER_PACKET
    fault: Optional[FaultModel] = None

    @classmethod
    def from_mapping(cls, overrides: Dict[str, str]) -> "BenchConfig":
        raw = dict(_DEFAULTS)
        raw.update(overrides)
        resolutions = [r.strip() for r in raw["resolutions"].split(",") if r.strip()]
        for label in resolutions:
            if label not in media.RESOLUTIONS:
                raise ConfigError("resolutions: unknown label %r" % label)
        if not resolutions:
            raise ConfigError("resolutions must not be empty")
        codecs = []
        for name in raw["codecs"].split(","):
            name = name.strip()
            if not name:
                continue
            try:
                codecs.append(Codec(name))
            except ValueError:
                raise ConfigError("codecs: unknown codec %r" % name) from None
        if not codecs:
            raise ConfigError("codecs must not be empty")
        secured = raw["secured"]
        if secured == "both":
            secured_modes = [True, False]
        elif secured == "on":
            secured_modes = [True]
        elif secured == "off":
            secured_modes = [False]
        else:
            raise ConfigError("secured must be on, off or both, got %r" % secured)
        frames = _number("frames", raw["frames"], int)
        warmup = _number("warmup", raw["warmup"], int)
        if frames < 1:
            raise ConfigError("frames must be at least 1")
        if warmup < 0 or warmup >= frames:
            raise ConfigError("warmup must be in [0, frames)")
        fps = _number("fps", raw["fps"], float)
        if fps <= 0:
            raise ConfigError("fps must be positive")
        quality = _number("quality", raw["quality"], int)
        if not 1 <= quality <= 100:
            raise ConfigError("quality must be in [1, 100]")
        mtu = _number("mtu", raw["mtu"], int)
        if not 1 <= mtu <= MAX_MTU_PAYLOAD:
            raise ConfigError("mtu must be in [1, %d]" % MAX_MTU_PAYLOAD)
        motion = raw["motion"]
        if motion not in (media.MOTION_STATIC, media.MOTION_HANDHELD):
            raise ConfigError("motion must be static or handheld, got %r" % motion)
        trace_frames = _number("trace_frames", raw["trace_frames"], int)
        if trace_frames < 1:
            raise ConfigError("trace_frames must be at least 1")
        if raw["trace_resolution"] not in media.RESOLUTIONS:
            raise ConfigError("trace_resolution: unknown label %r"
                              % raw["trace_resolution"])
        try:
            trace_codec = Codec(raw["trace_codec"])
        except ValueError:
            raise ConfigError("trace_codec: unknown codec %r"
                              % raw["trace_codec"]) from None
        try:
            iv_mode = IvMode(raw["iv_mode"])
        except ValueError:
            raise ConfigError("iv_mode must be per-packet or session-constant,"
                              " got %r" % raw["iv_mode"]) from None
        loss = _number("loss_prob", raw["loss_prob"], float)
        dup = _number("dup_prob", raw["dup_prob"], float)
        corrupt = _number("corrupt_prob", raw["corrupt_prob"], float)
        reorder = _number("reorder_window", raw["reorder_window"], int)
        delay_min = _number("delay_min_ms", raw["delay_min_ms"], float)
        delay_max = _number("delay_max_ms", raw["delay_max_ms"], float)
        fault = None
        if loss or dup or corrupt or reorder or delay_min or delay_max:
            try:
                fault = FaultModel(
                    seed=_number("fault_seed", raw["fault_seed"], int),
                    loss_prob=loss, dup_prob=dup, corrupt_prob=corrupt,
                    reorder_window=reorder, delay_min_ms=delay_min,
                    delay_max_ms=delay_max)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return cls(
            resolutions=resolutions, codecs=codecs, secured_modes=secured_modes,
            frames=frames, warmup=warmup,
            seed=_number("seed", raw["seed"], int), fps=fps, quality=quality,
            wrap_base64=_bool_key("base64", raw["base64"]), mtu_payload=mtu,
            motion=motion, paced=_bool_key("paced", raw["paced"]),
            traces=_bool_key("traces", raw["traces"]),
            trace_frames=trace_frames,
            trace_resolution=raw["trace_resolution"], trace_codec=trace_codec,
            iv_mode=iv_mode, fault=fault)

    @classmethod
    def from_file(cls, path: str) -> "BenchConfig":
        try:
            with open(path, "r", encoding="ascii") as handle:
                text = handle.read()
        except OSError as exc:
            raise ConfigError("cannot read config %s: %s" % (path, exc)) from None
        return cls.from_mapping(parse_config_text(text))


@dataclass(frozen=True)
class TimingStats:
    mean: float
    p50: float
    p95: float


@dataclass
class CellStats:
    resolution: str
    codec: str
    secured: bool
    n: int
    timing: Dict[str, TimingStats]
    mean_payload_bytes: float
    mean_fps: Optional[float] = None
    fps_stderr: Optional[float] = None

    @property
    def mean_security_us(self) -> float:
        return self.timing["encrypt"].mean + self.timing["tag"].mean


@dataclass
class FpsDelta:
    resolution: str
    codec: str
    fps_secured: float
    fps_unsecured: float
    delta: float
    stderr: float


@dataclass
class Summary:
    cells: List[CellStats]
    deltas: List[FpsDelta]


CellKey = Tuple[str, str, bool]


def _cell_sort_key(key: CellKey):
    resolution, codec, secured = key
    return (_RES_ORDER.get(resolution, 99), resolution, codec, not secured)


def nearest_rank(sorted_values: List[float], q: float) -> float:
    """q-quantile as the smallest value covering a q share of the sample."""
    index = max(0, math.ceil(q * len(sorted_values)) - 1)
    return sorted_values[index]


def _fps_stats(samples: List[FpsSample]):
    values = [sample.fps for sample in samples]
    if not values:
        return None, None
    mean = statistics.fmean(values)
    if len(values) < 2:
        return mean, 0.0
    return mean, statistics.stdev(values) / math.sqrt(len(values))


def aggregate(records: List[MetricsRecord],
              fps_by_cell: Optional[Dict[CellKey, List[FpsSample]]] = None
              ) -> Summary:
    """Per-cell mean/p50/p95 for every timing plus FPS means and deltas."""
    if not records:
        raise EmptyInput("no records to aggregate")
    fps_by_cell = fps_by_cell or {}
    groups: Dict[CellKey, List[MetricsRecord]] = {}
    for record in records:
        key = (record.resolution, record.codec, record.secured)
        groups.setdefault(key, []).append(record)

    cells: List[CellStats] = []
    for key in sorted(groups, key=_cell_sort_key):
        resolution, codec, secured = key
        group = groups[key]
        timing: Dict[str, TimingStats] = {}
        for name, attr in (("encode", "t_encode_us"), ("encrypt", "t_encrypt_us"),
                           ("tag", "t_tag_us"), ("total", "t_total_us")):
            values = sorted(getattr(r, attr) for r in group)
            timing[name] = TimingStats(mean=statistics.fmean(values),
                                       p50=nearest_rank(values, 0.50),
                                       p95=nearest_rank(values, 0.95))
        mean_fps, fps_stderr = _fps_stats(fps_by_cell.get(key, []))
        cells.append(CellStats(
            resolution=resolution, codec=codec, secured=secured, n=len(group),
            timing=timing,
            mean_payload_bytes=statistics.fmean(r.payload_bytes for r in group),
            mean_fps=mean_fps, fps_stderr=fps_stderr))

    by_key = {(c.resolution, c.codec, c.secured): c for c in cells}
    deltas: List[FpsDelta] = []
    for cell in cells:
        if not cell.secured:
            continue
        other = by_key.get((cell.resolution, cell.codec, False))
        if other is None or cell.mean_fps is None or other.mean_fps is None:
            continue
        stderr = math.hypot(cell.fps_stderr or 0.0, other.fps_stderr or 0.0)
        deltas.append(FpsDelta(
            resolution=cell.resolution, codec=cell.codec,
            fps_secured=cell.mean_fps, fps_unsecured=other.mean_fps,
            delta=cell.mean_fps - other.mean_fps, stderr=stderr))
    return Summary(cells=cells, deltas=deltas)


def exclude_warmup(records: List[MetricsRecord], warmup: int
                   ) -> List[MetricsRecord]:
    return [r for r in records if r.frame_index >= warmup]


def write_records(path: str, records: List[MetricsRecord]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.frame_index, r.resolution, r.codec,
                             int(r.secured), repr(r.t_encode_us),
                             repr(r.t_encrypt_us), repr(r.t_tag_us),
                             repr(r.t_total_us), r.payload_bytes])


def read_records(path: str) -> List[MetricsRecord]:
    records: List[MetricsRecord] = []
    with open(path, "r", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise ConfigError("unexpected CSV header in %s" % path)
        for row in reader:
            records.append(MetricsRecord(
                frame_index=int(row[0]), resolution=row[1], codec=row[2],
                secured=bool(int(row[3])), t_encode_us=float(row[4]),
                t_encrypt_us=float(row[5]), t_tag_us=float(row[6]),
                t_total_us=float(row[7]), payload_bytes=int(row[8])))
    return records


def _fmt(value: Optional[float]) -> str:
    return "na" if value is None else "%.3f" % value


def emit_plot_data(summary: Summary, out_dir: str,
                   traces: Optional[Dict[str, List[FpsSample]]] = None
                   ) -> List[str]:
    """Write the five figure-analog TSV files; returns their paths.

    Deterministic for a given summary, so regeneration is byte-identical.
    """
    traces = traces or {}
    paths = []

    lines = ["resolution\tcodec\tmean_encrypt_us\tmean_tag_us"
             "\tmean_security_us\tmean_total_us"]
    for cell in summary.cells:
        if not cell.secured:
            continue
        lines.append("%s\t%s\t%s\t%s\t%s\t%s" % (
            cell.resolution, cell.codec, _fmt(cell.timing["encrypt"].mean),
            _fmt(cell.timing["tag"].mean), _fmt(cell.mean_security_us),
            _fmt(cell.timing["total"].mean)))
    paths.append(_write_tsv(out_dir, "time_by_resolution.tsv", lines))

    for codec in ("JPEG", "RAW"):
        lines = ["resolution\tfps_secured\tfps_unsecured\tdelta\tstderr"]
        for delta in summary.deltas:
            if delta.codec != codec:
                continue
            lines.append("%s\t%s\t%s\t%s\t%s" % (
                delta.resolution, _fmt(delta.fps_secured),
                _fmt(delta.fps_unsecured), _fmt(delta.delta),
                _fmt(delta.stderr)))
        paths.append(_write_tsv(out_dir, "fps_by_resolution_%s.tsv"
                                % codec.lower(), lines))

    for motion in (media.MOTION_STATIC, media.MOTION_HANDHELD):
        lines = ["window_start_s\tfps"]
        samples = traces.get(motion, [])
        base = samples[0].window_start_ts if samples else 0.0
        for sample in samples:
            lines.append("%s\t%s" % (_fmt(sample.window_start_ts - base),
                                     _fmt(sample.fps)))
        paths.append(_write_tsv(out_dir, "fps_trace_%s.tsv" % motion, lines))
    return paths


def _write_tsv(out_dir: str, name: str, lines: List[str]) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")
    return path


def summary_table(summary: Summary) -> str:
    lines = ["%-7s %-5s %-9s %6s %12s %12s %12s %10s" % (
        "res", "codec", "secured", "n", "mean_tot_us", "p95_tot_us",
        "sec_cost_us", "mean_fps")]
    for cell in summary.cells:
        lines.append("%-7s %-5s %-9s %6d %12.1f %12.1f %12.1f %10s" % (
            cell.resolution, cell.codec, "on" if cell.secured else "off",
            cell.n, cell.timing["total"].mean, cell.timing["total"].p95,
            cell.mean_security_us,
            "-" if cell.mean_fps is None else "%.1f" % cell.mean_fps))
    for delta in summary.deltas:
        lines.append("fps delta (secured-unsecured) %s %s: %+.2f +/- %.2f"
                     % (delta.resolution, delta.codec, delta.delta,
                        delta.stderr))
    return "\n".join(lines)


@dataclass
class ExperimentResult:
    records: List[MetricsRecord]
    summary: Summary
    fps_by_cell: Dict[CellKey, List[FpsSample]]
    traces: Dict[str, List[FpsSample]]
    csv_path: str
    summary_path: str
    plot_paths: List[str]


def _bench_session(seed: int, secured: bool) -> SessionState:
    if not secured:
        return SessionState(state=State.PLAYING, session_id=1, keys=None)
    master_key = hashlib.sha256(b"bench master %d" % seed).digest()
    salt = hashlib.sha256(b"bench salt %d" % seed).digest()[:crypto.SALT_LEN]
    sid = 1 + seed % ((1 << 32) - 1)
    keys = crypto.derive_session_keys(crypto.MasterSecret(master_key, salt), sid)
    return SessionState(state=State.PLAYING, session_id=sid, keys=keys)


def _stream_config(config: BenchConfig, codec: Codec, secured: bool
                   ) -> StreamConfig:
    return StreamConfig(codec=codec, quality=config.quality,
                        wrap_base64=config.wrap_base64,
                        mtu_payload=config.mtu_payload, secured=secured,
                        iv_mode=config.iv_mode)


def _endpoints(config: BenchConfig):
    max_datagram = max(transport.DEFAULT_MAX_DATAGRAM, config.mtu_payload + 44)
    if config.fault is not None:
        channel = SimulatedChannel(config.fault, max_datagram=max_datagram)
        return channel, channel
    sender = UdpEndpoint(max_datagram=max_datagram)
    receiver = UdpEndpoint(max_datagram=max_datagram)
    sender.connect(*receiver.local_address)
    return sender, receiver


def _run_lockstep(config: BenchConfig, resolution: str, codec: Codec,
                  secured: bool, motion: str, frames: int
                  ) -> Tuple[List[MetricsRecord], List[FpsSample]]:
    session = _bench_session(config.seed, secured)
    stream_config = _stream_config(config, codec, secured)
    sender_ep, receiver_ep = _endpoints(config)
    source = media.synthetic_source(resolution, seed=config.seed,
                                    motion=motion)
    receiver = StreamReceiver(session.keys, config=stream_config,
                              on_frame=lambda frame, t: None,
                              expected_resolution=media.RESOLUTIONS[resolution])
    sender = FrameSender(session, sender_ep, config=stream_config,
                         ssrc=(config.seed * 2654435761 + 1) & 0xFFFFFFFF)
    records: List[MetricsRecord] = []
    drained = 0
    try:
        for i, frame in enumerate(itertools.islice(source.frames(), frames)):
            records.append(sender.send_frame(frame, i))
            if config.fault is not None:
                while True:
                    try:
                        wire = receiver_ep.recv()
                    except Timeout:
                        break
                    receiver.push_datagram(wire)
            else:
                while drained < sender.datagrams_sent:
                    receiver.push_datagram(receiver_ep.recv(timeout=5.0))
                    drained += 1
    finally:
        sender_ep.close()
        if receiver_ep is not sender_ep:
            receiver_ep.close()
    return records, fps_samples(receiver.arrival_times)


def _run_paced(config: BenchConfig, resolution: str, codec: Codec,
               secured: bool, motion: str, frames: int
               ) -> Tuple[List[MetricsRecord], List[FpsSample]]:
    session = _bench_session(config.seed, secured)
    stream_config = _stream_config(config, codec, secured)
    sender_ep, receiver_ep = _endpoints(config)
    source = media.synthetic_source(resolution, seed=config.seed,
                                    motion=motion)
    receiver = StreamReceiver(session.keys, config=stream_config,
                              on_frame=lambda frame, t: None,
                              expected_resolution=media.RESOLUTIONS[resolution])
    drain = threading.Thread(
        target=receiver.run, args=(receiver_ep, frames, 1.0), daemon=True)
    drain.start()
    try:
        records = stream_frames(
            itertools.islice(source.frames(), frames), session, sender_ep,
            pacing=PacingPolicy(target_fps=config.fps), config=stream_config,
            max_frames=frames,
            ssrc=(config.seed * 2654435761 + 2) & 0xFFFFFFFF)
        drain.join(timeout=frames / config.fps + 30)
    finally:
        sender_ep.close()
        if receiver_ep is not sender_ep:
            receiver_ep.close()
    return records, fps_samples(receiver.arrival_times)


def run_experiment(config: BenchConfig, out_dir: str) -> ExperimentResult:
    """Run every configured cell plus trace runs; write CSV, summary, plots."""
    os.makedirs(out_dir, exist_ok=True)
    runner = _run_paced if config.paced else _run_lockstep
    all_records: List[MetricsRecord] = []
    fps_by_cell: Dict[CellKey, List[FpsSample]] = {}
    for resolution, codec, secured in itertools.product(
            config.resolutions, config.codecs, config.secured_modes):
        records, samples = runner(config, resolution, codec, secured,
                                  config.motion, config.frames)
        all_records.extend(records)
        fps_by_cell[(resolution, codec.value, secured)] = samples

    traces: Dict[str, List[FpsSample]] = {}
    if config.traces:
        for motion in (media.MOTION_STATIC, media.MOTION_HANDHELD):
            _, samples = _run_lockstep(
                config, config.trace_resolution, config.trace_codec, True,
                motion, config.trace_frames)
            traces[motion] = samples

    csv_path = os.path.join(out_dir, CSV_NAME)
    write_records(csv_path, all_records)
    summary = aggregate(exclude_warmup(all_records, config.warmup),
                        fps_by_cell)
    summary_path = os.path.join(out_dir, SUMMARY_NAME)
    with open(summary_path, "w") as handle:
        handle.write(summary_table(summary) + "\n")
    plot_paths = emit_plot_data(summary, out_dir, traces)
    return ExperimentResult(records=all_records, summary=summary,
                            fps_by_cell=fps_by_cell, traces=traces,
                            csv_path=csv_path, summary_path=summary_path,
                            plot_paths=plot_paths)
