"""OpenIGTLink v2 compatible wire protocol: codec plus TCP server/client sessions.

Only the v2 framing subset needed for tracking is implemented: TRANSFORM
carries a tracked rigid pose, STATUS carries session health, and every other
type name decodes to UnknownType with its raw body preserved so a stream can
skip unfamiliar messages and continue.  All integers on the wire are
big-endian; the 58-byte header layout is

    version   uint16 (2)
    type      12 bytes ASCII, NUL padded
    device    20 bytes ASCII, NUL padded
    timestamp uint32 seconds + uint32 fraction (32.32 fixed point)
    body_size uint64
    body_crc  uint64 (CRC-64/ECMA-182 of the body)
"""

import collections
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .transforms import RigidTransform

HEADER_SIZE = 58
TRANSFORM_BODY_SIZE = 48
# Guard against nonsense body_size fields before trying to buffer the body.
MAX_BODY_SIZE = 1 << 20
DEFAULT_TRACKER_PORT = 18944

_HEADER = struct.Struct(">H12s20sIIQQ")
_STATUS_FIXED = struct.Struct(">Hq20s")


def tracker_port() -> int:
    """Tracker port from NAV_TRACKER_PORT, defaulting to 18944."""
    return int(os.environ.get("NAV_TRACKER_PORT", str(DEFAULT_TRACKER_PORT)))


class ProtocolError(Exception):
    """Malformed or inconsistent wire data."""


class ShortReadError(ProtocolError):
    pass


class CrcMismatchError(ProtocolError):
    pass


class VersionMismatchError(ProtocolError):
    pass


class BodyTooLargeError(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# CRC-64/ECMA-182: poly 0x42F0E1EBA9EA3693, init 0, not reflected, xorout 0.

_CRC_POLY = 0x42F0E1EBA9EA3693
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _crc_table():
    table = []
    for i in range(256):
        crc = i << 56
        for _ in range(8):
            if crc & (1 << 63):
                crc = ((crc << 1) ^ _CRC_POLY) & _MASK64
            else:
                crc = (crc << 1) & _MASK64
        table.append(crc)
    return table


_CRC_TABLE = _crc_table()


def crc64(data) -> int:
    crc = 0
    for b in bytes(data):
        crc = (_CRC_TABLE[((crc >> 56) ^ b) & 0xFF] ^ (crc << 8)) & _MASK64
    return crc


# ---------------------------------------------------------------------------
# Messages

@dataclass(frozen=True)
class MessageHeader:
    version: int
    type_name: str
    device_name: str
    timestamp: float
    body_size: int
    body_crc: int


@dataclass(frozen=True, eq=False)
class TransformMessage:
    """Decoded TRANSFORM: 3x4 matrix, rotation columns then position (mm)."""

    header: MessageHeader
    matrix: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, TransformMessage)
            and self.header == other.header
            and np.array_equal(self.matrix, other.matrix)
        )

    @property
    def device_name(self) -> str:
        return self.header.device_name

    @property
    def timestamp(self) -> float:
        return self.header.timestamp

    def transform(self) -> RigidTransform:
        """Rigid transform, rotation re-orthonormalized past float32 rounding."""
        u, _, vt = np.linalg.svd(self.matrix[:, :3])
        return RigidTransform(u @ vt, self.matrix[:, 3])


@dataclass(frozen=True)
class StatusMessage:
    header: MessageHeader
    code: int
    subcode: int
    error_name: str
    message: str


@dataclass(frozen=True)
class UnknownType:
    """Unrecognized type name; raw body kept so the stream can continue."""

    header: MessageHeader
    body: bytes


def _pack_name(name: str, width: int, what: str) -> bytes:
    try:
        raw = name.encode("ascii")
    except UnicodeEncodeError:
        raise ProtocolError(f"{what} must be ASCII: {name!r}")
    if len(raw) > width:
        raise ProtocolError(f"{what} longer than {width} bytes: {name!r}")
    return raw


def _split_timestamp(ts: float):
    if ts < 0:
        raise ProtocolError("timestamp must be nonnegative")
    sec = int(ts)
    frac = int(round((ts - sec) * 4294967296.0))
    if frac >= 1 << 32:
        sec, frac = sec + 1, 0
    return sec, frac


def _encode(type_name: str, device: str, timestamp: float, body: bytes) -> bytes:
    sec, frac = _split_timestamp(timestamp)
    header = _HEADER.pack(
        2,
        _pack_name(type_name, 12, "type name"),
        _pack_name(device, 20, "device name"),
        sec,
        frac,
        len(body),
        crc64(body),
    )
    return header + body


def encode_transform(device: str, timestamp: float, t: RigidTransform) -> bytes:
    """Encode a rigid pose as a 106-byte TRANSFORM message."""
    matrix = np.hstack([t.rotation, t.translation[:, None]])
    body = matrix.astype(">f4").tobytes(order="F")
    return _encode("TRANSFORM", device, timestamp, body)


def encode_status(device: str, timestamp: float, code: int, subcode: int = 0,
                  error_name: str = "", message: str = "") -> bytes:
    body = _STATUS_FIXED.pack(code, subcode, _pack_name(error_name, 20, "error name"))
    body += _pack_name(message, MAX_BODY_SIZE - 30, "status message")
    return _encode("STATUS", device, timestamp, body)


def _parse_header(data: bytes) -> MessageHeader:
    if len(data) < HEADER_SIZE:
        raise ShortReadError(f"need {HEADER_SIZE} header bytes, have {len(data)}")
    version, type_raw, device_raw, sec, frac, body_size, body_crc = _HEADER.unpack(
        data[:HEADER_SIZE]
    )
    if version != 2:
        raise VersionMismatchError(f"unsupported protocol version {version}")
    if body_size > MAX_BODY_SIZE:
        raise BodyTooLargeError(f"body_size {body_size} exceeds {MAX_BODY_SIZE}")
    return MessageHeader(
        version=version,
        type_name=type_raw.rstrip(b"\x00").decode("ascii", errors="replace"),
        device_name=device_raw.rstrip(b"\x00").decode("ascii", errors="replace"),
        timestamp=sec + frac / 4294967296.0,
        body_size=body_size,
        body_crc=body_crc,
    )


def _decode_body(header: MessageHeader, body: bytes):
    if crc64(body) != header.body_crc:
        raise CrcMismatchError("body CRC mismatch")
    if header.type_name == "TRANSFORM":
        if len(body) != TRANSFORM_BODY_SIZE:
            raise ProtocolError(f"TRANSFORM body must be 48 bytes, got {len(body)}")
        matrix = np.frombuffer(body, dtype=">f4").astype(float).reshape(3, 4, order="F")
        r = matrix[:, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-3):
            raise ProtocolError("TRANSFORM rotation not orthonormal")
        return TransformMessage(header, matrix)
    if header.type_name == "STATUS":
        if len(body) < 30:
            raise ProtocolError(f"STATUS body must be >= 30 bytes, got {len(body)}")
        code, subcode, error_raw = _STATUS_FIXED.unpack(body[:30])
        return StatusMessage(
            header,
            code=code,
            subcode=subcode,
            error_name=error_raw.rstrip(b"\x00").decode("ascii", errors="replace"),
            message=body[30:].decode("ascii", errors="replace"),
        )
    return UnknownType(header, body)


def decode_message(data: bytes):
    """Decode the message at the start of data; trailing bytes are ignored."""
    header = _parse_header(data)
    end = HEADER_SIZE + header.body_size
    if len(data) < end:
        raise ShortReadError(f"need {end} bytes, have {len(data)}")
    return _decode_body(header, data[HEADER_SIZE:end])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ShortReadError(f"connection closed after {len(buf)}/{n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def read_message(sock: socket.socket):
    """Read and decode exactly one framed message from a stream socket."""
    header = _parse_header(_recv_exact(sock, HEADER_SIZE))
    return _decode_body(header, _recv_exact(sock, header.body_size))


# ---------------------------------------------------------------------------
# Server: fans a single pose stream out to any number of clients.  Tracking is
# state, not events, so a lagging client drops its oldest queued messages.

class TrackerServer:
    def __init__(self, port=0, host: str = "127.0.0.1", max_lag: int = 32,
                 send_buffer=None):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(8)
        self.port = self._listener.getsockname()[1]
        self._max_lag = max_lag
        self._send_buffer = send_buffer
        self._clients = []
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    @property
    def stopped(self) -> bool:
        return self._stopped.is_set()

    @property
    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)

    def _accept_loop(self):
        while not self._stopped.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            if self._send_buffer is not None:
                conn.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, self._send_buffer)
            client = _ClientState(conn, self._max_lag)
            with self._lock:
                self._clients.append(client)
            threading.Thread(target=self._send_loop, args=(client,), daemon=True).start()

    def _send_loop(self, client):
        while True:
            with client.cond:
                while not client.queue and client.alive:
                    client.cond.wait(0.1)
                if not client.queue:
                    break
                data = client.queue.popleft()
                client.sending = True
            try:
                client.sock.sendall(data)
            except OSError:
                self._drop(client)
                return
            finally:
                with client.cond:
                    client.sending = False
                    client.cond.notify_all()
        self._drop(client)

    def _drop(self, client):
        with client.cond:
            client.alive = False
            client.sending = False
            client.cond.notify_all()
        try:
            client.sock.close()
        except OSError:
            pass
        with self._lock:
            if client in self._clients:
                self._clients.remove(client)

    def push(self, device: str, timestamp: float, t: RigidTransform) -> None:
        """Queue one pose for every connected client (oldest dropped on lag)."""
        data = encode_transform(device, timestamp, t)
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            with client.cond:
                if client.alive:
                    client.queue.append(data)
                    client.cond.notify()

    def drain(self, timeout: float = 10.0) -> bool:
        """Wait until every client queue has been flushed onto its socket."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            with client.cond:
                while client.alive and (client.queue or client.sending):
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        return False
                    client.cond.wait(remaining if remaining is not None else 0.5)
        return True

    def stop(self) -> None:
        self._stopped.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            self._drop(client)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


class _ClientState:
    def __init__(self, sock, max_lag):
        self.sock = sock
        self.queue = collections.deque(maxlen=max_lag)
        self.cond = threading.Condition()
        self.alive = True
        self.sending = False


def run_tracker_server(port=0, source=None, **kwargs) -> TrackerServer:
    """Start a tracker server; optionally feed it from a pose iterable.

    source yields (device_name, timestamp_seconds, RigidTransform) tuples and
    controls its own pacing (sleep inside the generator for a live rate).
    """
    server = TrackerServer(port=port, **kwargs)
    if source is not None:
        def produce():
            for device, timestamp, t in source:
                if server.stopped:
                    break
                server.push(device, timestamp, t)
        threading.Thread(target=produce, daemon=True).start()
    return server


# ---------------------------------------------------------------------------
# Client: auto-reconnecting consumer delivering poses on one callback thread.

class TrackerClient:
    BACKOFF_INITIAL = 0.1
    BACKOFF_CAP = 5.0

    def __init__(self, host: str, port: int, on_pose, on_status=None, on_error=None):
        self.host = host
        self.port = port
        self.on_pose = on_pose
        self.on_status = on_status
        self.on_error = on_error
        self.connections = 0
        self._stop = threading.Event()
        self._sock = None
        self._sock_lock = threading.Lock()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _report(self, exc):
        if self.on_error is not None:
            try:
                self.on_error(exc)
            except Exception:
                pass

    def _run(self):
        backoff = self.BACKOFF_INITIAL
        while not self._stop.is_set():
            try:
                sock = socket.create_connection((self.host, self.port), timeout=2.0)
            except OSError as exc:
                self._report(exc)
                if self._stop.wait(backoff):
                    return
                backoff = min(backoff * 2.0, self.BACKOFF_CAP)
                continue
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._sock_lock:
                if self._stop.is_set():
                    sock.close()
                    return
                self._sock = sock
            self.connections += 1
            got_message = False
            try:
                while not self._stop.is_set():
                    msg = read_message(sock)
                    got_message = True
                    if isinstance(msg, TransformMessage):
                        self.on_pose(msg)
                    elif isinstance(msg, StatusMessage) and self.on_status is not None:
                        self.on_status(msg)
                    # UnknownType: skip and continue
            except (ProtocolError, OSError) as exc:
                if not self._stop.is_set():
                    self._report(exc)
            finally:
                with self._sock_lock:
                    self._sock = None
                try:
                    sock.close()
                except OSError:
                    pass
            # A session that produced data restarts the backoff ladder.
            if got_message:
                backoff = self.BACKOFF_INITIAL
            if self._stop.wait(backoff):
                return
            backoff = min(backoff * 2.0, self.BACKOFF_CAP)

    def stop(self) -> None:
        self._stop.set()
        with self._sock_lock:
            if self._sock is not None:
                try:
                    self._sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                try:
                    self._sock.close()
                except OSError:
                    pass
        self._thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def connect_tracker_client(host: str, port: int, on_pose, **kwargs) -> TrackerClient:
    return TrackerClient(host, port, on_pose, **kwargs)
