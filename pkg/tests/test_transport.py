import threading
import time

import pytest

from rtpsec import crypto, media, netsim, packet, transport
from rtpsec.control import SessionState, State
from rtpsec.errors import OversizedDatagram, SocketClosed, Timeout
from rtpsec.media import Codec
from rtpsec.netsim import FaultModel
from rtpsec.transport import (
    FpsSample,
    FrameSender,
    PacingPolicy,
    SimulatedChannel,
    StreamConfig,
    StreamReceiver,
    UdpEndpoint,
    fps_samples,
    stream_frames,
)

KEYS = crypto.derive_session_keys(
    crypto.MasterSecret(bytes(range(32)), bytes(range(16))), 41)


def playing_session():
    return SessionState(state=State.PLAYING, session_id=41, rtp_port=5004,
                        keys=KEYS, uri="rtsp://cam.local/stream")


class CaptureEndpoint:
    max_datagram = transport.UDP_MAX_DATAGRAM

    def __init__(self):
        self.sent = []

    def send(self, datagram, addr=None):
        self.sent.append(bytes(datagram))


def endpoint_pair(max_datagram=transport.DEFAULT_MAX_DATAGRAM):
    a = UdpEndpoint(max_datagram=max_datagram)
    b = UdpEndpoint(max_datagram=max_datagram)
    a.connect(*b.local_address)
    return a, b


def test_udp_loopback_identity():
    a, b = endpoint_pair()
    try:
        payload = bytes(range(256)) * 4
        a.send(payload)
        assert b.recv(timeout=2.0) == payload
    finally:
        a.close()
        b.close()


def test_udp_oversized_datagram_refused():
    a, b = endpoint_pair(max_datagram=1452)
    try:
        with pytest.raises(OversizedDatagram):
            a.send(bytes(1453))
        a.send(bytes(1452))
        assert len(b.recv(timeout=2.0)) == 1452
    finally:
        a.close()
        b.close()


def test_udp_recv_timeout():
    ep = UdpEndpoint()
    try:
        before = time.perf_counter()
        with pytest.raises(Timeout):
            ep.recv(timeout=0.01)
        assert time.perf_counter() - before < 0.5
    finally:
        ep.close()


def test_udp_closed_endpoint_raises():
    ep = UdpEndpoint()
    ep.close()
    with pytest.raises(SocketClosed):
        ep.send(b"x", ("127.0.0.1", 9))
    with pytest.raises(SocketClosed):
        ep.recv(timeout=0.01)


def test_simulated_channel_identity():
    channel = SimulatedChannel(FaultModel())
    sent = [b"dg-%03d" % i for i in range(50)]
    for datagram in sent:
        channel.send(datagram)
    got = [channel.recv() for _ in range(50)]
    assert got == sent
    with pytest.raises(Timeout):
        channel.recv()


def test_simulated_channel_matches_offline_simulate():
    model = FaultModel(seed=6, loss_prob=0.1, dup_prob=0.1, reorder_window=4,
                       delay_min_ms=0.0, delay_max_ms=2.0)
    trace = [b"dg-%03d" % i for i in range(200)]
    channel = SimulatedChannel(model)
    for datagram in trace:
        channel.send(datagram)
    received = []
    while True:
        try:
            received.append(channel.recv())
        except Timeout:
            break
    expected = [datagram for datagram, _ in netsim.simulate(trace, model)]
    assert received == expected


def test_simulated_channel_enforces_size():
    channel = SimulatedChannel(FaultModel(), max_datagram=100)
    with pytest.raises(OversizedDatagram):
        channel.send(bytes(101))


def test_pacing_policy_validation():
    with pytest.raises(ValueError):
        PacingPolicy(target_fps=0)
    with pytest.raises(ValueError):
        PacingPolicy(target_fps=-5.0)
    with pytest.raises(ValueError):
        PacingPolicy(target_fps=30, burst=0)


def test_sender_wire_matches_protect():
    capture = CaptureEndpoint()
    sender = FrameSender(playing_session(), capture,
                         config=StreamConfig(codec=Codec.RAW,
                                             wrap_base64=False,
                                             mtu_payload=4096),
                         ssrc=0x1234ABCD)
    source = media.synthetic_source("480p", seed=3)
    frame = source.take(1)[0]
    record = sender.send_frame(frame, 0)
    encoded = media.encode_frame(frame, Codec.RAW, wrap_base64=False)
    fragments = packet.fragment_frame(encoded.payload, 4096)
    assert len(capture.sent) == len(fragments)
    index = crypto.PacketIndex(ssrc=0x1234ABCD, index=0)
    for wire, (chunk, last) in zip(capture.sent, fragments):
        header = packet.RtpHeader(marker=last, payload_type=96,
                                  sequence_number=index.sequence_number,
                                  timestamp=frame.capture_ts & 0xFFFFFFFF,
                                  ssrc=index.ssrc)
        assert wire == packet.protect(KEYS, index, header, chunk)
        index.advance()
    assert record.payload_bytes == len(encoded.payload)


def test_metrics_record_invariants():
    capture = CaptureEndpoint()
    sender = FrameSender(playing_session(), capture,
                         config=StreamConfig(codec=Codec.JPEG), ssrc=7)
    for i, frame in enumerate(media.synthetic_source("480p", seed=1).take(5)):
        record = sender.send_frame(frame, i)
        assert record.t_encode_us >= 0
        assert record.t_encrypt_us >= 0
        assert record.t_tag_us >= 0
        assert record.t_total_us >= (record.t_encode_us + record.t_encrypt_us
                                     + record.t_tag_us)
        assert record.resolution == "480p"
        assert record.codec == "JPEG"
        assert record.secured is True


def test_unsecured_sender_emits_zero_tags():
    capture = CaptureEndpoint()
    session = SessionState(state=State.PLAYING, session_id=1, keys=None)
    sender = FrameSender(session, capture,
                         config=StreamConfig(codec=Codec.RAW,
                                             wrap_base64=False,
                                             secured=False),
                         ssrc=9)
    frame = media.synthetic_source("480p", seed=2).take(1)[0]
    sender.send_frame(frame, 0)
    raw = frame.data
    seen = b"".join(wire[packet.HEADER_LEN:-packet.TAG_LEN]
                    for wire in capture.sent)
    assert seen == raw
    for wire in capture.sent:
        assert wire[-packet.TAG_LEN:] == transport.ZERO_TAG


def test_stream_frames_requires_playing():
    ready = SessionState(state=State.READY, session_id=3, keys=KEYS)
    with pytest.raises(ValueError):
        stream_frames([], ready, CaptureEndpoint())


def test_stream_frames_stops_when_session_leaves_playing():
    session = playing_session()
    capture = CaptureEndpoint()
    source = media.synthetic_source("480p", seed=4)

    def frames_then_pause():
        for i, frame in enumerate(source.frames()):
            if i == 3:
                session.state = State.READY
            yield frame

    records = stream_frames(frames_then_pause(), session, capture,
                            config=StreamConfig(codec=Codec.JPEG),
                            max_frames=50, ssrc=5)
    assert len(records) == 3


def test_pacing_wall_time_bounds():
    session = playing_session()
    capture = CaptureEndpoint()
    source = media.synthetic_source("480p", seed=5).take(30)
    start = time.perf_counter()
    records = stream_frames(source, session, capture,
                            pacing=PacingPolicy(target_fps=30.0),
                            config=StreamConfig(codec=Codec.JPEG), ssrc=6)
    elapsed = time.perf_counter() - start
    assert len(records) == 30
    assert 1.0 <= elapsed < 1.5


def end_to_end(secured, codec, wrap_base64, frames=12, resolution="480p"):
    session = playing_session() if secured else SessionState(
        state=State.PLAYING, session_id=1, keys=None)
    config = StreamConfig(codec=codec, wrap_base64=wrap_base64,
                          secured=secured, mtu_payload=1200)
    sender_ep, receiver_ep = endpoint_pair()
    source = media.synthetic_source(resolution, seed=8).take(frames)
    receiver = StreamReceiver(KEYS if secured else None, config=config,
                              expected_resolution=media.RESOLUTIONS[resolution])
    drain = threading.Thread(target=receiver.run,
                             args=(receiver_ep, frames, 2.0), daemon=True)
    drain.start()
    try:
        stream_frames(source, session, sender_ep, config=config, ssrc=11)
        drain.join(timeout=30)
    finally:
        sender_ep.close()
        receiver_ep.close()
    return source, receiver


@pytest.mark.parametrize("secured", [True, False])
def test_end_to_end_raw_identity(secured):
    source, receiver = end_to_end(secured, Codec.RAW, True)
    assert receiver.auth_failures == 0
    assert receiver.frames_ok == len(source)
    for sent, (_, got) in zip(source, receiver.frames):
        assert got.data == sent.data
        assert got.capture_ts == sent.capture_ts & 0xFFFFFFFF


def test_end_to_end_jpeg_decodes():
    source, receiver = end_to_end(True, Codec.JPEG, True)
    assert receiver.frames_ok == len(source)
    for sent, (_, got) in zip(source, receiver.frames):
        assert (got.width, got.height) == (sent.width, sent.height)


def test_wrong_keys_reject_every_packet():
    session = playing_session()
    config = StreamConfig(codec=Codec.RAW, mtu_payload=1200)
    sender_ep, receiver_ep = endpoint_pair()
    wrong = crypto.derive_session_keys(
        crypto.MasterSecret(bytes(32), bytes(range(16))), 41)
    receiver = StreamReceiver(wrong, config=config,
                              expected_resolution=(854, 480))
    try:
        source = media.synthetic_source("480p", seed=9).take(3)
        stream_frames(source, session, sender_ep, config=config, ssrc=12)
        receiver.run(receiver_ep, max_frames=3, idle_timeout=0.3)
    finally:
        sender_ep.close()
        receiver_ep.close()
    assert receiver.frames_ok == 0
    assert receiver.auth_failures > 0


def delivered_frame_oracle(frame_ranges, delivered_indices):
    """Frames whose fragments all arrived and whose start is confirmable.

    With loss as the only fault, packets arrive in index order, so a
    frame is emitted exactly when every fragment is present and either it
    starts at index 0 or the packet just before it (the previous frame's
    marker) was also delivered.
    """
    emitted = []
    for frame_id, (lo, hi) in frame_ranges.items():
        if all(i in delivered_indices for i in range(lo, hi + 1)):
            if lo == 0 or (lo - 1) in delivered_indices:
                emitted.append(frame_id)
    return emitted


def test_lossy_delivery_matches_trace_oracle():
    session = playing_session()
    config = StreamConfig(codec=Codec.RAW, wrap_base64=False, mtu_payload=1200)
    capture = CaptureEndpoint()
    frames = media.synthetic_source("480p", seed=10).take(40)
    frame_ranges = {}
    sender = FrameSender(session, capture, config=config, ssrc=21)
    next_index = 0
    for i, frame in enumerate(frames):
        sender.send_frame(frame, i)
        frame_ranges[i] = (next_index, sender.datagrams_sent - 1)
        next_index = sender.datagrams_sent

    model = FaultModel(seed=17, loss_prob=0.05)
    schedule = netsim.simulate(capture.sent, model)
    position = {wire: i for i, wire in enumerate(capture.sent)}
    delivered_indices = {position[wire] for wire, _ in schedule}

    receiver = StreamReceiver(KEYS, config=config,
                              expected_resolution=(854, 480))
    for wire, _ in schedule:
        receiver.push_datagram(wire)

    got_ids = sorted(ts // media.synthetic_source("480p").ts_step
                     for _, f in receiver.frames
                     for ts in [f.capture_ts])
    expected = sorted(delivered_frame_oracle(frame_ranges, delivered_indices))
    assert got_ids == expected
    for _, got in receiver.frames:
        matching = frames[got.capture_ts // 3000]
        assert got.data == matching.data


def test_fps_samples_constant_rate():
    times = [i * 0.1 for i in range(21)]
    samples = fps_samples(times)
    assert len(samples) == 5
    for n, sample in enumerate(samples):
        assert sample == FpsSample(window_start_ts=pytest.approx(n * 0.25),
                                   frames_in_window=10, fps=10.0)


def test_fps_samples_edge_cases():
    assert fps_samples([]) == []
    assert fps_samples([0.0, 0.5]) == []
    burst = [0.0] * 30 + [1.0]
    samples = fps_samples(burst, window_s=1.0, step_s=0.5)
    assert samples[0].frames_in_window == 30
