"""Telemetry wire protocol and the teleop gateway server.

Frames are a 4-byte big-endian payload length followed by a UTF-8 JSON
object carrying a "type" field (see PROTOCOL.md). The same JSON objects are
also served over a built-in WebSocket endpoint on the same port (one object
per text frame) so browser clients can connect; the transport is sniffed
from the first bytes of each connection.

Slow consumers never touch the control loop: every session has its own
writer thread fed by a bounded queue. Robot states are lossless up to 256
messages then oldest-dropped; grid maps are newest-wins snapshots.
"""

from __future__ import annotations

import base64
import hashlib
import json
import queue
import socket
import struct
import threading
from collections import deque

MAX_FRAME = 1 << 24
STATE_BUFFER = 256

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

INBOUND_FIELDS = {
    "cmd_vel": {"vx", "vy", "wz"},
    "mode_request": {"mode"},
    "heartbeat": set(),
    "estop": set(),
    "reset": set(),
}

OUTBOUND_FIELDS = {
    "robot_state": {
        "t", "mode", "base_position", "base_orientation", "base_lin_vel",
        "base_ang_vel", "joint_pos", "joint_vel", "joint_torque",
        "projected_gravity", "lin_vel_body", "contact_flags",
    },
    "grid_map": {"origin", "resolution", "size", "heights", "variances", "valid"},
    "event": {"level", "text"},
}

MESSAGE_FIELDS = {**INBOUND_FIELDS, **OUTBOUND_FIELDS}


class ProtocolError(ValueError):
    pass


def validate_message(msg) -> dict:
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object")
    mtype = msg.get("type")
    if mtype not in MESSAGE_FIELDS:
        raise ProtocolError(f"unknown message type {mtype!r}")
    missing = MESSAGE_FIELDS[mtype] - set(msg)
    if missing:
        raise ProtocolError(f"{mtype} message missing fields {sorted(missing)}")
    return msg


def encode_payload(msg: dict) -> bytes:
    return json.dumps(validate_message(msg), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def decode_payload(payload: bytes) -> dict:
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"payload is not valid JSON: {e}") from e
    return validate_message(msg)


def encode_frame(msg: dict) -> bytes:
    payload = encode_payload(msg)
    return struct.pack(">I", len(payload)) + payload


def read_frame(sock) -> dict:
    """Read one length-prefixed message; raises ConnectionError on EOF."""
    header = _recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame length {length} exceeds {MAX_FRAME}")
    return decode_payload(_recv_exact(sock, length))


def _recv_exact(sock, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return buf


def event_message(level: str, text: str) -> dict:
    return {"type": "event", "level": level, "text": text}


def robot_state_message(t, mode, state, joint_torque, estimate) -> dict:
    return {
        "type": "robot_state",
        "t": float(t),
        "mode": mode.value,
        "base_position": [float(v) for v in state.base_position],
        "base_orientation": [float(v) for v in state.base_orientation],
        "base_lin_vel": [float(v) for v in state.base_lin_vel],
        "base_ang_vel": [float(v) for v in state.base_ang_vel],
        "joint_pos": [float(v) for v in state.q],
        "joint_vel": [float(v) for v in state.qd],
        "joint_torque": [float(v) for v in joint_torque],
        "projected_gravity": [float(v) for v in estimate.projected_gravity],
        "lin_vel_body": [float(v) for v in estimate.lin_vel_body],
        "contact_flags": [bool(v) for v in estimate.contact_flags],
    }


class _Session:
    """One connected client: reader plus a backpressure-isolated writer."""

    def __init__(self, server, sock, addr):
        self.server = server
        self.sock = sock
        self.addr = addr
        self.states = deque(maxlen=STATE_BUFFER)   # lossless-ish time series
        self.latest_grid = None                    # newest-wins snapshot
        self.events = deque(maxlen=64)
        self.cond = threading.Condition()
        self.alive = True
        self.websocket = False

    # --- outbound ---

    def offer(self, kind: str, msg: dict):
        with self.cond:
            if kind == "state":
                self.states.append(msg)
            elif kind == "grid":
                self.latest_grid = msg
            else:
                self.events.append(msg)
            self.cond.notify()

    def writer_loop(self):
        try:
            while self.alive:
                with self.cond:
                    while (self.alive and not self.states
                           and self.latest_grid is None and not self.events):
                        self.cond.wait(timeout=0.5)
                    batch = list(self.events)
                    self.events.clear()
                    batch.extend(self.states)
                    self.states.clear()
                    if self.latest_grid is not None:
                        batch.append(self.latest_grid)
                        self.latest_grid = None
                for msg in batch:
                    self._send(msg)
        except (OSError, ConnectionError):
            pass
        finally:
            self.close()

    def _send(self, msg: dict):
        if self.websocket:
            self.sock.sendall(_ws_text_frame(encode_payload(msg)))
        else:
            self.sock.sendall(encode_frame(msg))

    # --- inbound ---

    def reader_loop(self):
        try:
            # sniff the transport: length-prefixed frames never start with 'G'
            first = self.sock.recv(1, socket.MSG_PEEK)
            if first == b"G":
                self.websocket = True
                _ws_handshake(self.sock)
            threading.Thread(target=self.writer_loop, daemon=True).start()
            while self.alive:
                try:
                    if self.websocket:
                        payload = _ws_read_message(self.sock)
                        if payload is None:
                            break
                        msg = decode_payload(payload)
                    else:
                        msg = read_frame(self.sock)
                except ProtocolError as e:
                    # stay connected: framing is intact, content was bad
                    self.offer("event", event_message("error", str(e)))
                    continue
                self.server.inbox.put(msg)
        except (OSError, ConnectionError, ValueError):
            pass
        finally:
            self.close()

    def close(self):
        if not self.alive:
            return
        self.alive = False
        with self.cond:
            self.cond.notify_all()
        try:
            self.sock.close()
        except OSError:
            pass
        self.server._drop(self)


class TelemetryServer:
    """Accepts sessions, routes inbound messages to `inbox`, fans out
    snapshots. publish_* never block the caller."""

    def __init__(self, host: str = "127.0.0.1", port: int = 8765):
        self.host = host
        self.port = port
        self.inbox = queue.Queue()
        self.sessions = []
        self._lock = threading.Lock()
        self._listener = None
        self._accept_thread = None

    def start(self):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self.port))   # raises on bind failure
        listener.listen(16)
        self.port = listener.getsockname()[1]
        self._listener = listener
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while True:
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            session = _Session(self, sock, addr)
            with self._lock:
                self.sessions.append(session)
            threading.Thread(target=session.reader_loop, daemon=True).start()

    def _drop(self, session):
        with self._lock:
            if session in self.sessions:
                self.sessions.remove(session)

    def publish_state(self, msg: dict):
        self._publish("state", msg)

    def publish_grid(self, msg: dict):
        self._publish("grid", msg)

    def publish_event(self, msg: dict):
        self._publish("event", msg)

    def _publish(self, kind: str, msg: dict):
        with self._lock:
            sessions = list(self.sessions)
        for s in sessions:
            s.offer(kind, msg)

    def client_count(self) -> int:
        with self._lock:
            return len(self.sessions)

    def stop(self):
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            sessions = list(self.sessions)
        for s in sessions:
            s.close()


class TelemetryClient:
    """Minimal blocking client for tests and scripted drivers."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg: dict):
        self.sock.sendall(encode_frame(msg))

    def send_raw(self, data: bytes):
        self.sock.sendall(data)

    def recv(self) -> dict:
        return read_frame(self.sock)

    def close(self):
        self.sock.close()


# --- minimal RFC 6455 WebSocket support --------------------------------------

def _ws_handshake(sock):
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionError("websocket handshake aborted")
        data += chunk
        if len(data) > 65536:
            raise ProtocolError("oversized websocket handshake")
    headers = {}
    for line in data.split(b"\r\n")[1:]:
        if b":" in line:
            k, v = line.split(b":", 1)
            headers[k.strip().lower()] = v.strip()
    key = headers.get(b"sec-websocket-key")
    if key is None:
        raise ProtocolError("websocket handshake missing key")
    accept = base64.b64encode(
        hashlib.sha1(key + WS_GUID.encode("ascii")).digest())
    sock.sendall(b"HTTP/1.1 101 Switching Protocols\r\n"
                 b"Upgrade: websocket\r\n"
                 b"Connection: Upgrade\r\n"
                 b"Sec-WebSocket-Accept: " + accept + b"\r\n\r\n")


def _ws_text_frame(payload: bytes) -> bytes:
    n = len(payload)
    if n < 126:
        header = bytes([0x81, n])
    elif n < 1 << 16:
        header = bytes([0x81, 126]) + struct.pack(">H", n)
    else:
        header = bytes([0x81, 127]) + struct.pack(">Q", n)
    return header + payload


def _ws_read_message(sock):
    """One complete text message (handles masking, ping, close)."""
    while True:
        b0b1 = _recv_exact(sock, 2)
        opcode = b0b1[0] & 0x0F
        masked = bool(b0b1[1] & 0x80)
        length = b0b1[1] & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", _recv_exact(sock, 2))
        elif length == 127:
            (length,) = struct.unpack(">Q", _recv_exact(sock, 8))
        if length > MAX_FRAME:
            raise ProtocolError(f"websocket frame length {length} too large")
        mask = _recv_exact(sock, 4) if masked else b"\x00" * 4
        payload = bytearray(_recv_exact(sock, length))
        if masked:
            for i in range(length):
                payload[i] ^= mask[i % 4]
        if opcode == 0x8:                   # close
            return None
        if opcode == 0x9:                   # ping -> pong
            sock.sendall(bytes([0x8A, len(payload) & 0x7F]) + bytes(payload))
            continue
        if opcode in (0x1, 0x2):
            return bytes(payload)
        # ignore pongs/continuations of control traffic
