import random
import socket
import threading

import pytest

from rtpsec import control, crypto
from rtpsec.control import (
    ControlRequest,
    ControlResponse,
    ControlServer,
    ControlClient,
    Method,
    SessionState,
    State,
    Status,
    parse_request,
    parse_response,
    serialize_request,
    serialize_response,
    transition,
)
from rtpsec.errors import (
    MalformedLine,
    MissingCSeq,
    ParseError,
    RemoteError,
    Timeout,
    UnknownMethod,
)
from rtpsec.keys import StaticKeyProvider

MASTER_KEY = bytes(range(32))
SALT = bytes(range(16))


def provider():
    return StaticKeyProvider(MASTER_KEY)


def setup_request(cseq=1, uri="rtsp://cam.local/stream", port=5004,
                  salt=SALT):
    return ControlRequest(Method.SETUP, uri, cseq, {
        "Transport": control.format_transport(port),
        "Master-Salt": salt.hex(),
    })


def reach(state_name, key_provider=None):
    """Drive a fresh session to the named state with valid requests."""
    kp = key_provider or provider()
    st = SessionState()
    if state_name is State.INIT:
        return st, kp
    st, resp = transition(st, setup_request(), kp)
    assert resp.status == 200
    if state_name is State.READY:
        return st, kp
    st, resp = transition(
        st, ControlRequest(Method.PLAY, "rtsp://cam.local/stream", 2,
                           {"Session": str(st.session_id)}), kp)
    assert resp.status == 200
    return st, kp


def test_setup_serialization_is_bit_exact():
    req = ControlRequest(Method.SETUP, "rtsp://cam.local/stream", 1, {
        "Transport": "RTP/AVP;unicast;client_port=5004",
        "Master-Salt": "000102030405060708090a0b0c0d0e0f",
    })
    expected = (b"SETUP rtsp://cam.local/stream RTSP/1.0\r\n"
                b"CSeq: 1\r\n"
                b"Transport: RTP/AVP;unicast;client_port=5004\r\n"
                b"Master-Salt: 000102030405060708090a0b0c0d0e0f\r\n"
                b"\r\n")
    assert serialize_request(req) == expected


def test_response_serialization_reason_phrases():
    cases = {
        200: b"RTSP/1.0 200 OK\r\nCSeq: 3\r\n\r\n",
        400: b"RTSP/1.0 400 Bad Request\r\nCSeq: 3\r\n\r\n",
        404: b"RTSP/1.0 404 Not Found\r\nCSeq: 3\r\n\r\n",
        455: b"RTSP/1.0 455 Method Not Valid in This State\r\nCSeq: 3\r\n\r\n",
        500: b"RTSP/1.0 500 Internal Server Error\r\nCSeq: 3\r\n\r\n",
    }
    for status, wire in cases.items():
        assert serialize_response(ControlResponse(3, status)) == wire


def test_request_roundtrip_random():
    rng = random.Random(11)
    uris = ["rtsp://cam.local/stream", "stream/1", "a", "rtsp://h:554/x?y=z"]
    for _ in range(200):
        method = rng.choice(list(Method))
        headers = {}
        if rng.random() < 0.7:
            headers["Session"] = str(rng.randrange(1, 1 << 32))
        if rng.random() < 0.3:
            headers["Transport"] = control.format_transport(rng.randrange(65536))
        req = ControlRequest(method, rng.choice(uris),
                             rng.randrange(1, 10 ** 9), headers)
        assert parse_request(serialize_request(req)) == req


def test_response_roundtrip_random():
    rng = random.Random(12)
    for _ in range(100):
        resp = ControlResponse(rng.randrange(1, 10 ** 6),
                               rng.choice([200, 400, 404, 455, 500]),
                               {"Session": str(rng.randrange(1, 1 << 32))})
        assert parse_response(serialize_response(resp)) == resp


@pytest.mark.parametrize("wire,exc", [
    (b"FETCH stream RTSP/1.0\r\nCSeq: 1\r\n\r\n", UnknownMethod),
    (b"PLAY stream RTSP/1.0\r\nSession: 7\r\n\r\n", MissingCSeq),
    (b"PLAY stream HTTP/1.1\r\nCSeq: 1\r\n\r\n", MalformedLine),
    (b"PLAY stream\r\nCSeq: 1\r\n\r\n", MalformedLine),
    (b"PLAY a b RTSP/1.0\r\nCSeq: 1\r\n\r\n", MalformedLine),
    (b"PLAY stream RTSP/1.0\r\nCSeq: 1\r\n", MalformedLine),
    (b"PLAY stream RTSP/1.0\nCSeq: 1\n\n", MalformedLine),
    (b"PLAY stream RTSP/1.0\r\nCSeq: one\r\n\r\n", MalformedLine),
    (b"PLAY stream RTSP/1.0\r\nCSeq: 1\r\nCSeq: 2\r\n\r\n", MalformedLine),
    (b"PLAY stream RTSP/1.0\r\nCSeq:1\r\n\r\n", MalformedLine),
    (b"PLAY stream RTSP/1.0\r\nCSeq: 1\r\nno colon here\r\n\r\n",
     MalformedLine),
    (b"PLAY stream RTSP/1.0\r\nCSeq: 1\r\n\r\nPLAY", MalformedLine),
    (b"\r\n\r\n", MalformedLine),
    (b"PLAY str\xc3\xa9am RTSP/1.0\r\nCSeq: 1\r\n\r\n", MalformedLine),
])
def test_request_parse_rejections(wire, exc):
    with pytest.raises(exc):
        parse_request(wire)


def test_parse_is_total_over_junk():
    rng = random.Random(0xC0)
    for _ in range(400):
        blob = bytes(rng.randrange(256) for _ in range(rng.randrange(2048)))
        try:
            parse_request(blob)
        except ParseError:
            pass
        try:
            parse_response(blob)
        except ParseError:
            pass


def test_parse_is_total_over_mutations():
    rng = random.Random(0xC1)
    base = serialize_request(setup_request())
    for _ in range(400):
        blob = bytearray(base)
        op = rng.randrange(3)
        if op == 0:
            blob[rng.randrange(len(blob))] ^= 1 << rng.randrange(8)
        elif op == 1:
            blob = blob[: rng.randrange(len(blob))]
        else:
            blob += bytes(rng.randrange(256) for _ in range(rng.randrange(8)))
        try:
            parse_request(bytes(blob))
        except ParseError:
            pass


LEGALITY = [
    (State.INIT, Method.SETUP, 200, State.READY),
    (State.INIT, Method.PLAY, 455, State.INIT),
    (State.INIT, Method.PAUSE, 455, State.INIT),
    (State.INIT, Method.TEARDOWN, 200, State.INIT),
    (State.READY, Method.SETUP, 455, State.READY),
    (State.READY, Method.PLAY, 200, State.PLAYING),
    (State.READY, Method.PAUSE, 455, State.READY),
    (State.READY, Method.TEARDOWN, 200, State.INIT),
    (State.PLAYING, Method.SETUP, 455, State.PLAYING),
    (State.PLAYING, Method.PLAY, 455, State.PLAYING),
    (State.PLAYING, Method.PAUSE, 200, State.READY),
    (State.PLAYING, Method.TEARDOWN, 200, State.INIT),
]


@pytest.mark.parametrize("start,method,status,end", LEGALITY)
def test_transition_table(start, method, status, end):
    st, kp = reach(start)
    if method is Method.SETUP:
        req = setup_request(cseq=9)
    else:
        req = ControlRequest(method, "rtsp://cam.local/stream", 9,
                             {"Session": str(st.session_id)})
    new, resp = transition(st, req, kp)
    assert resp.status == status
    assert new.state is end
    assert resp.cseq == 9
    assert (new.keys is None) == (new.state is State.INIT)


def test_setup_response_carries_nonzero_session():
    st, kp = reach(State.INIT)
    new, resp = transition(st, setup_request(), kp)
    assert resp.status == 200
    sid = int(resp.headers["Session"])
    assert sid != 0
    assert new.session_id == sid
    assert new.rtp_port == 5004
    assert new.uri == "rtsp://cam.local/stream"


def test_setup_keys_match_direct_derivation():
    st, kp = reach(State.INIT)
    new, resp = transition(st, setup_request(), kp)
    expected = crypto.derive_session_keys(
        crypto.MasterSecret(MASTER_KEY, SALT), new.session_id)
    assert new.keys == expected


def test_setup_unknown_uri_is_404():
    class NoKeys:
        def fetch_master_key(self, identity, uri):
            from rtpsec.errors import KeyNotFound
            raise KeyNotFound(uri)

    st = SessionState()
    new, resp = transition(st, setup_request(), NoKeys())
    assert resp.status == 404
    assert new.state is State.INIT
    assert new.keys is None


def test_setup_provider_crash_is_500():
    class Broken:
        def fetch_master_key(self, identity, uri):
            raise RuntimeError("backend down")

    new, resp = transition(SessionState(), setup_request(), Broken())
    assert resp.status == 500
    assert new.state is State.INIT


@pytest.mark.parametrize("headers", [
    {"Master-Salt": SALT.hex()},
    {"Transport": "RTP/AVP;unicast;client_port=5004"},
    {"Transport": "RTP/AVP;multicast;client_port=5004",
     "Master-Salt": SALT.hex()},
    {"Transport": "RTP/AVP;unicast;client_port=", "Master-Salt": SALT.hex()},
    {"Transport": "RTP/AVP;unicast;client_port=99999",
     "Master-Salt": SALT.hex()},
    {"Transport": "RTP/AVP;unicast;client_port=5004", "Master-Salt": "abc"},
    {"Transport": "RTP/AVP;unicast;client_port=5004",
     "Master-Salt": SALT.hex().upper()},
    {"Transport": "RTP/AVP;unicast;client_port=5004",
     "Master-Salt": SALT.hex() + "00"},
])
def test_setup_malformed_headers_are_400(headers):
    req = ControlRequest(Method.SETUP, "rtsp://cam.local/stream", 1, headers)
    new, resp = transition(SessionState(), req, provider())
    assert resp.status == 400
    assert new.state is State.INIT


def test_session_mismatch_is_400_state_unchanged():
    st, kp = reach(State.READY)
    wrong = str((st.session_id % (1 << 32)) + 1)
    for method in (Method.PLAY, Method.TEARDOWN):
        new, resp = transition(
            st, ControlRequest(method, "u", 3, {"Session": wrong}), kp)
        assert resp.status == 400
        assert new is st


def test_state_legality_checked_before_session_match():
    st, kp = reach(State.INIT)
    req = ControlRequest(Method.PLAY, "u", 1, {"Session": "garbage"})
    _, resp = transition(st, req, kp)
    assert resp.status == 455


def test_teardown_is_idempotent():
    st, kp = reach(State.PLAYING)
    req = ControlRequest(Method.TEARDOWN, "u", 5,
                         {"Session": str(st.session_id)})
    st, resp = transition(st, req, kp)
    assert resp.status == 200 and st.state is State.INIT
    st, resp = transition(st, ControlRequest(Method.TEARDOWN, "u", 6, {}), kp)
    assert resp.status == 200 and st.state is State.INIT


def test_transition_does_not_mutate_input_state():
    st, kp = reach(State.READY)
    before = (st.state, st.session_id, st.keys)
    transition(st, ControlRequest(Method.PLAY, "u", 3,
                                  {"Session": str(st.session_id)}), kp)
    assert (st.state, st.session_id, st.keys) == before


def test_random_walk_preserves_invariants():
    rng = random.Random(77)
    kp = provider()
    st = SessionState()
    statuses = {200, 400, 404, 455, 500}
    for cseq in range(1, 600):
        method = rng.choice(list(Method))
        if method is Method.SETUP:
            salt = bytes(rng.randrange(256) for _ in range(16))
            req = setup_request(cseq=cseq, salt=salt)
        else:
            if st.session_id is not None and rng.random() < 0.6:
                session = str(st.session_id)
            else:
                session = str(rng.randrange(1 << 32))
            req = ControlRequest(method, "rtsp://cam.local/stream", cseq,
                                 {"Session": session})
        st, resp = transition(st, req, kp)
        assert resp.cseq == cseq
        assert resp.status in statuses
        assert (st.keys is None) == (st.state is State.INIT)
        assert (st.session_id is None) == (st.state is State.INIT)
        if st.session_id is not None:
            assert 0 < st.session_id < 1 << 32


def client_server_pair(kp=None, timeout=5.0):
    kp = kp or provider()
    server = ControlServer(kp)
    a, b = socket.socketpair()
    thread = threading.Thread(target=server.handle_connection,
                              args=(b, "test-peer"), daemon=True)
    thread.start()
    client = ControlClient(a, kp, timeout=timeout)
    return client, server, thread, b


def finish(client, thread, server_end):
    client.close()
    server_end.close()
    thread.join(timeout=5)


def test_client_server_full_session():
    client, server, thread, b = client_server_pair()
    try:
        sid, keys = client.setup("rtsp://cam.local/stream", 5004)
        assert client.state is State.READY
        server_state = server.sessions[sid]
        assert server_state.keys == keys
        assert server_state.rtp_port == 5004
        client.play()
        assert client.state is State.PLAYING
        assert server.sessions[sid].state is State.PLAYING
        client.pause()
        assert server.sessions[sid].state is State.READY
        client.teardown()
        assert client.state is State.INIT
        assert client.keys is None
        assert sid not in server.sessions
    finally:
        finish(client, thread, b)
        server.close()


def test_client_play_before_setup_is_refused():
    client, server, thread, b = client_server_pair()
    try:
        with pytest.raises(RemoteError) as info:
            client.play()
        assert info.value.status == 455
        assert client.state is State.INIT
    finally:
        finish(client, thread, b)
        server.close()


def test_repeated_setups_agree_on_keys():
    client, server, thread, b = client_server_pair()
    try:
        seen = set()
        for _ in range(5):
            sid, keys = client.setup("rtsp://cam.local/stream", 5004)
            assert server.sessions[sid].keys == keys
            seen.add(sid)
            client.teardown()
        assert len(seen) == 5
    finally:
        finish(client, thread, b)
        server.close()


def test_server_rejects_cseq_regression():
    kp = provider()
    server = ControlServer(kp)
    a, b = socket.socketpair()
    thread = threading.Thread(target=server.handle_connection,
                              args=(b, "peer"), daemon=True)
    thread.start()
    a.settimeout(5.0)
    try:
        a.sendall(serialize_request(setup_request(cseq=5)))
        resp = parse_response(control.read_message(a))
        assert resp.status == 200
        a.sendall(serialize_request(ControlRequest(
            Method.TEARDOWN, "u", 5, {"Session": resp.headers["Session"]})))
        resp2 = parse_response(control.read_message(a))
        assert resp2.status == 400
        a.sendall(serialize_request(ControlRequest(
            Method.TEARDOWN, "u", 6, {"Session": resp.headers["Session"]})))
        resp3 = parse_response(control.read_message(a))
        assert resp3.status == 200
    finally:
        a.close()
        b.close()
        thread.join(timeout=5)
        server.close()


def test_server_answers_400_to_garbage():
    server = ControlServer(provider())
    a, b = socket.socketpair()
    thread = threading.Thread(target=server.handle_connection,
                              args=(b, "peer"), daemon=True)
    thread.start()
    a.settimeout(5.0)
    try:
        a.sendall(b"NONSENSE\r\n\r\n")
        resp = parse_response(control.read_message(a))
        assert resp.status == 400
        a.sendall(serialize_request(setup_request(cseq=1)))
        assert parse_response(control.read_message(a)).status == 200
    finally:
        a.close()
        b.close()
        thread.join(timeout=5)
        server.close()


def test_client_times_out_without_server():
    a, b = socket.socketpair()
    client = ControlClient(a, provider(), timeout=0.2)
    try:
        with pytest.raises(Timeout):
            client.play()
    finally:
        client.close()
        b.close()


def test_server_over_tcp_serve_one():
    kp = provider()
    server = ControlServer(kp)
    result = {}

    def run():
        try:
            server.serve_one(timeout=5.0)
        except Exception as exc:  # pragma: no cover
            result["error"] = exc

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    client = ControlClient.connect("127.0.0.1", server.port, kp, timeout=5.0)
    try:
        sid, keys = client.setup("rtsp://cam.local/stream", 5004)
        client.play()
        client.teardown()
    finally:
        client.close()
        thread.join(timeout=5)
        server.close()
    assert "error" not in result


def test_mint_session_id_avoids_live_ids():
    rng = random.Random(3)
    live = {1, 2, 3}
    for _ in range(100):
        sid = control.mint_session_id(live, rng=rng.randrange)
        assert sid not in live
        assert 0 < sid < 1 << 32
