"""Binary wire contract for telemetry and load-command messages.

Fixed-length big-endian frames with a trailing CRC-32 (IEEE polynomial,
as computed by zlib.crc32). Telemetry layout (msg-type 0x01):

    offset  size  field
    0       2     magic 0x4D 0x47
    2       1     version 0x01; bit 0x80 set when the in-band SoC field is present
    3       1     msg-type 0x01
    4       4     seq, u32
    8       8     t_ms, u64
    16      40    five f64: p_bess, p_pv, p_grid, p_load, v_load
    [56     8     soc_pct f64, only with the version extension bit]
    56|64   1     breaker status, u8 (0 grid-connected, 1 islanded)
    +1      4     CRC-32 over all preceding bytes

    total 61 bytes, 69 with in-band SoC

Command layout (msg-type 0x02, never extended): magic, version, msg-type,
seq u32, connect u8, setpoint f64, CRC-32; total 21 bytes.

Codec functions are pure; the channel classes at the bottom provide the
byte transports the plant, attack proxy and control center talk over.
"""

from __future__ import annotations

import math
import select
import socket
import struct
import threading
import zlib
from collections import deque
from typing import Iterator, Optional

from .errors import ConfigError
from .plant import BreakerStatus, LoadCommand, MeasurementVector, TelemetryFrame

MAGIC = b"\x4d\x47"
VERSION = 0x01
VERSION_EXT_SOC = 0x80  # telemetry carries a sixth f64 (SoC) before the breaker byte
MSG_TELEMETRY = 0x01
MSG_COMMAND = 0x02

TELEMETRY_LEN = 61
TELEMETRY_SOC_LEN = 69
COMMAND_LEN = 21

_HEAD = struct.Struct(">2sBBIQ")  # magic, version, msg-type, seq, t_ms (telemetry)
_CMD_HEAD = struct.Struct(">2sBBI")  # magic, version, msg-type, seq


class WireError(Exception):
    """Base class for malformed frames; never raised for valid input."""


class BadMagic(WireError):
    pass


class BadVersion(WireError):
    pass


class BadType(WireError):
    pass


class BadLength(WireError):
    pass


class BadCrc(WireError):
    pass


class BadEnum(WireError):
    pass


class BadValue(WireError):
    """Field outside its domain (non-finite float, negative setpoint)."""


class TransportLoss(Exception):
    """Connection ended mid-frame; the session cannot continue."""


def _check_u32(name: str, v: int) -> None:
    if not 0 <= v <= 0xFFFFFFFF:
        raise ConfigError(f"{name} out of u32 range")


def _check_finite(name: str, v: float) -> None:
    if not math.isfinite(v):
        raise ConfigError(f"{name} must be finite")


def encode_telemetry(frame: TelemetryFrame) -> bytes:
    """Encode a telemetry frame; extended to 69 bytes when soc_pct is present."""
    _check_u32("seq", frame.seq)
    if not 0 <= frame.t_ms <= 0xFFFFFFFFFFFFFFFF:
        raise ConfigError("t_ms out of u64 range")
    m = frame.meas
    for name in ("p_bess_w", "p_pv_w", "p_grid_w", "p_load_w", "v_load_v"):
        _check_finite(name, getattr(m, name))
    version = VERSION
    body = struct.pack(">5d", m.p_bess_w, m.p_pv_w, m.p_grid_w, m.p_load_w, m.v_load_v)
    if frame.soc_pct is not None:
        _check_finite("soc_pct", frame.soc_pct)
        version |= VERSION_EXT_SOC
        body += struct.pack(">d", frame.soc_pct)
    body += bytes((int(frame.breaker_reported),))
    head = _HEAD.pack(MAGIC, version, MSG_TELEMETRY, frame.seq, frame.t_ms)
    payload = head + body
    return payload + struct.pack(">I", zlib.crc32(payload))


def _check_header(buf: bytes, want_type: Optional[int] = None) -> tuple:
    """Validate the 4-byte header; returns (version_base, ext, msg_type)."""
    if len(buf) < 4:
        raise BadLength(f"frame shorter than header: {len(buf)} bytes")
    if buf[0:2] != MAGIC:
        raise BadMagic(f"expected 4d47, got {buf[0:2].hex()}")
    version = buf[2]
    ext = bool(version & VERSION_EXT_SOC)
    base = version & ~VERSION_EXT_SOC
    if base != VERSION:
        raise BadVersion(f"unsupported version 0x{version:02x}")
    msg_type = buf[3]
    if msg_type not in (MSG_TELEMETRY, MSG_COMMAND):
        raise BadType(f"unknown msg-type 0x{msg_type:02x}")
    if msg_type == MSG_COMMAND and ext:
        raise BadVersion("extension bit is not defined for commands")
    if want_type is not None and msg_type != want_type:
        raise BadType(f"expected msg-type 0x{want_type:02x}, got 0x{msg_type:02x}")
    return base, ext, msg_type


def expected_length(header: bytes) -> int:
    """Total frame length implied by a validated 4-byte header."""
    _, ext, msg_type = _check_header(header)
    if msg_type == MSG_COMMAND:
        return COMMAND_LEN
    return TELEMETRY_SOC_LEN if ext else TELEMETRY_LEN


def _check_crc(buf: bytes) -> None:
    stored, = struct.unpack(">I", buf[-4:])
    actual = zlib.crc32(buf[:-4])
    if stored != actual:
        raise BadCrc(f"crc mismatch: stored {stored:08x}, computed {actual:08x}")


def decode_telemetry(buf: bytes) -> TelemetryFrame:
    """Inverse of encode_telemetry; raises a distinct WireError per defect."""
    _, ext, _ = _check_header(buf, want_type=MSG_TELEMETRY)
    want = TELEMETRY_SOC_LEN if ext else TELEMETRY_LEN
    if len(buf) != want:
        raise BadLength(f"telemetry frame must be {want} bytes, got {len(buf)}")
    _check_crc(buf)
    _, _, _, seq, t_ms = _HEAD.unpack(buf[:16])
    values = struct.unpack(">5d", buf[16:56])
    off = 56
    soc = None
    if ext:
        soc, = struct.unpack(">d", buf[56:64])
        if not math.isfinite(soc):
            raise BadValue("soc_pct is not finite")
        off = 64
    for name, v in zip(("p_bess_w", "p_pv_w", "p_grid_w", "p_load_w", "v_load_v"), values):
        if not math.isfinite(v):
            raise BadValue(f"{name} is not finite")
    breaker_byte = buf[off]
    if breaker_byte not in (0, 1):
        raise BadEnum(f"breaker status must be 0 or 1, got {breaker_byte}")
    return TelemetryFrame(seq=seq, t_ms=t_ms,
                          meas=MeasurementVector(*values),
                          breaker_reported=BreakerStatus(breaker_byte),
                          soc_pct=soc)


def encode_command(cmd: LoadCommand) -> bytes:
    _check_u32("seq", cmd.seq)
    _check_finite("setpoint_w", cmd.setpoint_w)
    head = _CMD_HEAD.pack(MAGIC, VERSION, MSG_COMMAND, cmd.seq)
    body = bytes((1 if cmd.ctrl_load_connect else 0,)) + struct.pack(">d", cmd.setpoint_w)
    payload = head + body
    return payload + struct.pack(">I", zlib.crc32(payload))


def decode_command(buf: bytes) -> LoadCommand:
    _check_header(buf, want_type=MSG_COMMAND)
    if len(buf) != COMMAND_LEN:
        raise BadLength(f"command frame must be {COMMAND_LEN} bytes, got {len(buf)}")
    _check_crc(buf)
    _, _, _, seq = _CMD_HEAD.unpack(buf[:8])
    connect_byte = buf[8]
    if connect_byte not in (0, 1):
        raise BadEnum(f"connect flag must be 0 or 1, got {connect_byte}")
    setpoint, = struct.unpack(">d", buf[9:17])
    if not math.isfinite(setpoint) or setpoint < 0:
        raise BadValue(f"setpoint_w out of domain: {setpoint!r}")
    return LoadCommand(seq=seq, ctrl_load_connect=bool(connect_byte), setpoint_w=setpoint)


def decode_any(buf: bytes):
    """Decode either message type based on the header."""
    _, _, msg_type = _check_header(buf)
    if msg_type == MSG_COMMAND:
        return decode_command(buf)
    return decode_telemetry(buf)


def iter_frames(data: bytes) -> Iterator[bytes]:
    """Split a byte stream into raw frames (self-delimiting by fixed lengths).

    A trailing partial frame raises BadLength: frames are never silently
    dropped.
    """
    off = 0
    n = len(data)
    while off < n:
        if n - off < 4:
            raise BadLength("truncated header at end of stream")
        length = expected_length(data[off:off + 4])
        if n - off < length:
            raise BadLength("truncated frame at end of stream")
        yield data[off:off + length]
        off += length


# --------------------------------------------------------------------------
# Transports. One reader and one writer per direction; frames are written
# atomically, so fixed-length reads never interleave.

class Pipe:
    """One-directional in-memory byte stream with blocking reads."""

    def __init__(self):
        self._buf = deque()
        self._cond = threading.Condition()
        self._closed = False

    def write(self, data: bytes) -> None:
        with self._cond:
            if self._closed:
                raise TransportLoss("write on closed pipe")
            self._buf.append(bytes(data))
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def available(self) -> int:
        with self._cond:
            return sum(len(b) for b in self._buf)

    def read_exact(self, n: int) -> bytes:
        """Read exactly n bytes; b"" on clean EOF before any byte.

        EOF in the middle of a read raises TransportLoss.
        """
        out = bytearray()
        with self._cond:
            while len(out) < n:
                while not self._buf and not self._closed:
                    self._cond.wait()
                if not self._buf:
                    if not out:
                        return b""
                    raise TransportLoss("stream ended mid-frame")
                chunk = self._buf.popleft()
                need = n - len(out)
                if len(chunk) > need:
                    out += chunk[:need]
                    self._buf.appendleft(chunk[need:])
                else:
                    out += chunk
        return bytes(out)


class MemoryChannel:
    """Duplex in-memory channel; use MemoryChannel.pair() for the two ends."""

    def __init__(self, rx: Pipe, tx: Pipe):
        self._rx = rx
        self._tx = tx

    @classmethod
    def pair(cls) -> tuple:
        a2b, b2a = Pipe(), Pipe()
        return cls(b2a, a2b), cls(a2b, b2a)

    def write(self, data: bytes) -> None:
        self._tx.write(data)

    def read_exact(self, n: int) -> bytes:
        return self._rx.read_exact(n)

    def available(self) -> int:
        return self._rx.available()

    def close(self) -> None:
        self._tx.close()

    def close_both(self) -> None:
        self._tx.close()
        self._rx.close()


class SocketChannel:
    """Duplex channel over a connected socket (TCP loopback in deployment)."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def write(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise TransportLoss(str(exc)) from exc

    def read_exact(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            try:
                chunk = self._sock.recv(n - len(out))
            except OSError as exc:
                raise TransportLoss(str(exc)) from exc
            if not chunk:
                if not out:
                    return b""
                raise TransportLoss("connection ended mid-frame")
            out += chunk
        return bytes(out)

    def available(self) -> int:
        readable, _, _ = select.select([self._sock], [], [], 0)
        return 1 if readable else 0

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass

    def close_both(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def read_frame(chan) -> Optional[bytes]:
    """Read one whole frame from a channel; None on clean end of stream.

    Header defects (bad magic/version/type) make the remaining stream
    unframeable and are raised to the caller, which should fail fast.
    """
    head = chan.read_exact(4)
    if head == b"":
        return None
    length = expected_length(head)
    return head + chan.read_exact(length - 4)


class TcpListener:
    """Single-connection listener; port 0 binds an ephemeral port."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._srv.bind((host, port))
        self._srv.listen(1)
        self.port = self._srv.getsockname()[1]

    def accept(self, timeout: float = 10.0) -> "SocketChannel":
        self._srv.settimeout(timeout)
        try:
            conn, _ = self._srv.accept()
        finally:
            self._srv.close()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketChannel(conn)


def tcp_connect(host: str, port: int, timeout: float = 10.0) -> SocketChannel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketChannel(sock)
