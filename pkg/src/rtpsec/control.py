"""Session control: text grammar, state machine, client and server.

The control protocol is a small RTSP-style exchange over any reliable byte
stream (tests use TCP or socket pairs; wrapping the channel in TLS is an
extension point, not done here).  Grammar, bit-exact::

    request  = METHOD SP uri SP "RTSP/1.0" CRLF
               "CSeq: " number CRLF
               *(header-name ": " value CRLF)
               CRLF
    response = "RTSP/1.0" SP status-code SP reason CRLF
               "CSeq: " number CRLF
               *(header-name ": " value CRLF)
               CRLF

SETUP carries ``Transport: RTP/AVP;unicast;client_port=<port>`` and
``Master-Salt: <32 lowercase hex>``; its 200 response carries ``Session``
with a fresh non-zero session id, which both sides then feed into key
derivation together with the provisioned master key and the salt.  PLAY,
PAUSE and TEARDOWN carry ``Session``.

The state machine is Init -> Ready -> Playing with PAUSE returning to
Ready and TEARDOWN always landing in Init.  A second TEARDOWN still
answers 200 so clients can retry it safely.  Requests that are illegal in
the current state get 455, an unknown URI on SETUP gets 404, anything
malformed gets 400; the transition function itself never raises.
"""

import enum
import re
import secrets
import socket
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

from . import crypto
from .crypto import MasterSecret, SessionKeys
from .errors import (
    KeyNotFound,
    MalformedLine,
    MissingCSeq,
    ParseError,
    RemoteError,
    SocketClosed,
    Timeout,
    UnknownMethod,
)
from .keys import KeyProvider

VERSION_TOKEN = "RTSP/1.0"
DEFAULT_CONTROL_PORT = 8554
MAX_MESSAGE_BYTES = 64 * 1024


class Method(enum.Enum):
    SETUP = "SETUP"
    PLAY = "PLAY"
    PAUSE = "PAUSE"
    TEARDOWN = "TEARDOWN"


class Status(enum.IntEnum):
    OK = 200
    BAD_REQUEST = 400
    NOT_FOUND = 404
    METHOD_NOT_VALID = 455
    INTERNAL_ERROR = 500


_REASONS = {
    200: "OK",
    400: "Bad Request",
    404: "Not Found",
    455: "Method Not Valid in This State",
    500: "Internal Server Error",
}


class State(enum.Enum):
    INIT = "Init"
    READY = "Ready"
    PLAYING = "Playing"


@dataclass
class ControlRequest:
    method: Method
    uri: str
    cseq: int
    headers: Dict[str, str] = field(default_factory=dict)


@dataclass
class ControlResponse:
    cseq: int
    status: int
    headers: Dict[str, str] = field(default_factory=dict)


@dataclass
class SessionState:
    """One endpoint's view of a session; keys exist exactly outside Init."""

    state: State = State.INIT
    session_id: Optional[int] = None
    rtp_port: int = 0
    keys: Optional[SessionKeys] = None
    uri: Optional[str] = None


_TRANSPORT = re.compile(r"^RTP/AVP;unicast;client_port=(\d{1,5})$")
_SALT_HEX = re.compile(r"^[0-9a-f]{32}$")
_HEADER_NAME = re.compile(r"^[A-Za-z][A-Za-z0-9-]*$")
_URI = re.compile(r"^\S+$")


def format_transport(client_port: int) -> str:
    if not 0 <= client_port <= 65535:
        raise ValueError("client_port out of range")
    return "RTP/AVP;unicast;client_port=%d" % client_port


def parse_transport(value: str) -> Optional[int]:
    match = _TRANSPORT.match(value or "")
    if not match:
        return None
    port = int(match.group(1))
    return port if port <= 65535 else None


def serialize_request(request: ControlRequest) -> bytes:
    if not _URI.match(request.uri):
        raise ValueError("uri must be a non-empty token without spaces")
    lines = ["%s %s %s" % (request.method.value, request.uri, VERSION_TOKEN),
             "CSeq: %d" % request.cseq]
    lines += ["%s: %s" % item for item in request.headers.items()]
    return ("\r\n".join(lines) + "\r\n\r\n").encode("ascii")


def serialize_response(response: ControlResponse) -> bytes:
    reason = _REASONS.get(int(response.status), "Unknown")
    lines = ["%s %d %s" % (VERSION_TOKEN, int(response.status), reason),
             "CSeq: %d" % response.cseq]
    lines += ["%s: %s" % item for item in response.headers.items()]
    return ("\r\n".join(lines) + "\r\n\r\n").encode("ascii")


def _split_message(data: bytes):
    try:
        text = data.decode("ascii")
    except (UnicodeDecodeError, AttributeError):
        raise MalformedLine("message is not ASCII") from None
    if not text.endswith("\r\n\r\n"):
        raise MalformedLine("message does not end with a blank line")
    content = text[:-4]
    if "\r\n\r\n" in content:
        raise MalformedLine("embedded blank line")
    lines = content.split("\r\n")
    if not lines or not lines[0]:
        raise MalformedLine("empty message")
    return lines


def _parse_headers(lines):
    headers: Dict[str, str] = {}
    cseq: Optional[int] = None
    for line in lines:
        name, sep, value = line.partition(": ")
        if not sep or not _HEADER_NAME.match(name):
            raise MalformedLine("bad header line %r" % line)
        if name == "CSeq":
            if cseq is not None:
                raise MalformedLine("duplicate CSeq")
            if not value.isdigit():
                raise MalformedLine("CSeq value %r is not a number" % value)
            cseq = int(value)
            continue
        if name in headers:
            raise MalformedLine("duplicate header %r" % name)
        headers[name] = value
    if cseq is None:
        raise MissingCSeq("message lacks a CSeq header")
    return cseq, headers


def parse_request(data: bytes) -> ControlRequest:
    lines = _split_message(data)
    parts = lines[0].split(" ")
    if len(parts) != 3 or parts[2] != VERSION_TOKEN:
        raise MalformedLine("bad request line %r" % lines[0])
    name, uri = parts[0], parts[1]
    try:
        method = Method(name)
    except ValueError:
        raise UnknownMethod("method %r is not supported" % name) from None
    if not uri:
        raise MalformedLine("empty uri")
    cseq, headers = _parse_headers(lines[1:])
    return ControlRequest(method=method, uri=uri, cseq=cseq, headers=headers)


def parse_response(data: bytes) -> ControlResponse:
    lines = _split_message(data)
    parts = lines[0].split(" ", 2)
    if len(parts) < 2 or parts[0] != VERSION_TOKEN or not parts[1].isdigit():
        raise MalformedLine("bad status line %r" % lines[0])
    status = int(parts[1])
    cseq, headers = _parse_headers(lines[1:])
    return ControlResponse(cseq=cseq, status=status, headers=headers)


def mint_session_id(live_ids=(), rng=secrets.randbelow) -> int:
    """Uniform random non-zero 32-bit id avoiding currently live sessions."""
    while True:
        sid = rng(1 << 32)
        if sid and sid not in live_ids:
            return sid


def transition(state: SessionState, request: ControlRequest,
               key_provider: KeyProvider, peer_identity: str = "peer",
               mint: Callable[[], int] = mint_session_id
               ) -> Tuple[SessionState, ControlResponse]:
    """Pure state step; total over every (state, request) pair.

    Returns the next state and the response, never raises.  The input
    state is not mutated.
    """
    def answer(status, headers=None):
        return ControlResponse(cseq=request.cseq, status=int(status),
                               headers=dict(headers or {}))

    if request.method is Method.SETUP:
        if state.state is not State.INIT:
            return state, answer(Status.METHOD_NOT_VALID)
        port = parse_transport(request.headers.get("Transport", ""))
        salt_hex = request.headers.get("Master-Salt", "")
        if port is None or not _SALT_HEX.match(salt_hex):
            return state, answer(Status.BAD_REQUEST)
        try:
            master_key = key_provider.fetch_master_key(peer_identity, request.uri)
        except KeyNotFound:
            return state, answer(Status.NOT_FOUND)
        except Exception:
            return state, answer(Status.INTERNAL_ERROR)
        try:
            sid = mint()
            keys = crypto.derive_session_keys(
                MasterSecret(master_key, bytes.fromhex(salt_hex)), sid)
        except Exception:
            return state, answer(Status.INTERNAL_ERROR)
        fresh = SessionState(state=State.READY, session_id=sid, rtp_port=port,
                             keys=keys, uri=request.uri)
        return fresh, answer(Status.OK, {"Session": str(sid)})

    if request.method is Method.TEARDOWN:
        if state.state is State.INIT:
            return state, answer(Status.OK)
        if request.headers.get("Session") != str(state.session_id):
            return state, answer(Status.BAD_REQUEST)
        return SessionState(), answer(Status.OK)

    if request.method is Method.PLAY:
        if state.state is not State.READY:
            return state, answer(Status.METHOD_NOT_VALID)
        if request.headers.get("Session") != str(state.session_id):
            return state, answer(Status.BAD_REQUEST)
        return replace(state, state=State.PLAYING), answer(Status.OK)

    if request.method is Method.PAUSE:
        if state.state is not State.PLAYING:
            return state, answer(Status.METHOD_NOT_VALID)
        if request.headers.get("Session") != str(state.session_id):
            return state, answer(Status.BAD_REQUEST)
        return replace(state, state=State.READY), answer(Status.OK)

    return state, answer(Status.METHOD_NOT_VALID)  # pragma: no cover


def read_message(channel, limit: int = MAX_MESSAGE_BYTES) -> Optional[bytes]:
    """Read one CRLF-CRLF terminated message; None on clean EOF."""
    buf = bytearray()
    while b"\r\n\r\n" not in buf:
        if len(buf) > limit:
            raise MalformedLine("control message exceeds %d bytes" % limit)
        try:
            chunk = channel.recv(4096)
        except socket.timeout:
            raise Timeout("no control message within the deadline") from None
        except OSError:
            raise SocketClosed("socket error while reading") from None
        if not chunk:
            if buf:
                raise SocketClosed("connection closed mid-message")
            return None
        buf += chunk
    end = buf.index(b"\r\n\r\n") + 4
    if end != len(buf):
        raise MalformedLine("trailing bytes after control message")
    return bytes(buf)


class ControlClient:
    """Drives a remote session over a connected byte channel."""

    def __init__(self, channel, key_provider: KeyProvider,
                 identity: str = "client", timeout: float = 5.0):
        self.channel = channel
        self.key_provider = key_provider
        self.identity = identity
        if hasattr(channel, "settimeout"):
            channel.settimeout(timeout)
        self._cseq = 0
        self.state = State.INIT
        self.session_id: Optional[int] = None
        self.keys: Optional[SessionKeys] = None
        self.uri: Optional[str] = None

    @classmethod
    def connect(cls, host: str, port: int, key_provider: KeyProvider,
                identity: str = "client", timeout: float = 5.0):
        sock = socket.create_connection((host, port), timeout=timeout)
        return cls(sock, key_provider, identity=identity, timeout=timeout)

    def _call(self, method: Method, uri: str, headers) -> ControlResponse:
        self._cseq += 1
        request = ControlRequest(method=method, uri=uri, cseq=self._cseq,
                                 headers=headers)
        self.channel.sendall(serialize_request(request))
        data = read_message(self.channel)
        if data is None:
            raise SocketClosed("server closed the control connection")
        response = parse_response(data)
        if response.cseq != self._cseq:
            raise MalformedLine("response CSeq %d does not echo request %d"
                                % (response.cseq, self._cseq))
        return response

    def setup(self, uri: str, rtp_port: int) -> Tuple[int, SessionKeys]:
        """Negotiate a session and derive the same keys the server holds."""
        salt = crypto.fresh_master_salt()
        response = self._call(Method.SETUP, uri, {
            "Transport": format_transport(rtp_port),
            "Master-Salt": salt.hex(),
        })
        if response.status != Status.OK:
            raise RemoteError(response.status)
        session_value = response.headers.get("Session", "")
        if not session_value.isdigit() or int(session_value) == 0:
            raise MalformedLine("bad Session header %r" % session_value)
        sid = int(session_value)
        master_key = self.key_provider.fetch_master_key(self.identity, uri)
        self.keys = crypto.derive_session_keys(MasterSecret(master_key, salt), sid)
        self.session_id = sid
        self.uri = uri
        self.state = State.READY
        return sid, self.keys

    def _session_call(self, method: Method, next_state: State) -> None:
        response = self._call(method, self.uri or "*",
                              {"Session": str(self.session_id or 0)})
        if response.status != Status.OK:
            raise RemoteError(response.status)
        self.state = next_state
        if next_state is State.INIT:
            self.keys = None
            self.session_id = None

    def play(self) -> None:
        self._session_call(Method.PLAY, State.PLAYING)

    def pause(self) -> None:
        self._session_call(Method.PAUSE, State.READY)

    def teardown(self) -> None:
        self._session_call(Method.TEARDOWN, State.INIT)

    def close(self) -> None:
        try:
            self.channel.close()
        except OSError:  # pragma: no cover
            pass


class ControlServer:
    """Accepts control connections and serializes transitions per session.

    ``observer`` (if set) is called as ``observer(old, new, request, peer)``
    after every applied transition, which is how the media sender learns
    about PLAY, PAUSE and TEARDOWN.
    """

    def __init__(self, key_provider: KeyProvider, host: str = "127.0.0.1",
                 port: int = 0, observer=None):
        self.key_provider = key_provider
        self.observer = observer
        self.sessions: Dict[int, SessionState] = {}
        self._lock = threading.Lock()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(4)
        self.host, self.port = self._sock.getsockname()[:2]

    def serve_one(self, timeout: Optional[float] = None) -> None:
        """Accept a single connection and run it to completion."""
        self._sock.settimeout(timeout)
        try:
            conn, addr = self._sock.accept()
        except socket.timeout:
            raise Timeout("no client connected") from None
        with conn:
            self.handle_connection(conn, peer_identity=addr[0])

    def handle_connection(self, conn, peer_identity: str = "peer") -> None:
        state = SessionState()
        last_cseq: Optional[int] = None
        try:
            while True:
                try:
                    data = read_message(conn)
                except (MalformedLine, SocketClosed):
                    break
                if data is None:
                    break
                try:
                    request = parse_request(data)
                except ParseError:
                    conn.sendall(serialize_response(
                        ControlResponse(cseq=0, status=int(Status.BAD_REQUEST))))
                    continue
                if last_cseq is not None and request.cseq <= last_cseq:
                    conn.sendall(serialize_response(ControlResponse(
                        cseq=request.cseq, status=int(Status.BAD_REQUEST))))
                    continue
                last_cseq = request.cseq
                old = state
                with self._lock:
                    state, response = transition(
                        state, request, self.key_provider,
                        peer_identity=peer_identity,
                        mint=lambda: mint_session_id(self.sessions))
                    self._update_registry(old, state)
                if self.observer is not None:
                    self.observer(old, state, request, peer_identity)
                conn.sendall(serialize_response(response))
        finally:
            with self._lock:
                self._update_registry(state, SessionState())

    def _update_registry(self, old: SessionState, new: SessionState) -> None:
        if old.session_id and old.session_id != new.session_id:
            self.sessions.pop(old.session_id, None)
        if new.session_id:
            self.sessions[new.session_id] = new

    def close(self) -> None:
        self._sock.close()
