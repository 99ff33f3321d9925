"""Framed, ordered duplex channels between the two parties, with byte and
time accounting.

Every message is one frame: a 24-byte header followed by the payload.
Receiving happens on a background thread per endpoint, so both parties may
send large payloads at the same time without deadlocking on socket buffers.
"""
from __future__ import annotations

import enum
import hashlib
import json
import queue
import socket
import struct
import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import HandshakeError, ProtocolError, TransportError

FRAME_HEADER = struct.Struct("<4sIIBBI6x")
FRAME_MAGIC = b"PPFR"
SHARE_HEADER = struct.Struct("<4sHHHHI")
SHARE_MAGIC = b"PPIR"


class FrameType(enum.IntEnum):
    HANDSHAKE = 1
    CONTROL = 2
    SHARE = 3  # fresh uniform share of an input
    MASKED_OPEN = 4  # Beaver-masked operand
    TRUNC_OPEN = 5  # truncation-masked product
    RESULT_SHARE = 6  # share of the output, sent to its owner
    PUBLIC_KEY = 7
    CIPHERTEXT = 8
    CLEAR_RESULT = 9  # cleartext output or masked block sums
    DISCLOSURE = 10  # scalar agreed to be revealed (e.g. target energy)
    ERROR = 11
    CLOSE = 12


class Phase(enum.IntEnum):
    HANDSHAKE = 0
    SETUP = 1
    MATVEC = 2
    MATMUL = 3
    ENERGY = 4
    CONTROL = 5


# ---------------------------------------------------------------------------
# Payload codecs

def pack_share(array: np.ndarray, msg_type: int = 0, round_: int = 0, elem_bytes: int = 8) -> bytes:
    """Ring tensor wire format: 16-byte header, u32 dims, little-endian elements."""
    array = np.asarray(array)
    dtype = "<u4" if elem_bytes == 4 else "<u8"
    head = SHARE_HEADER.pack(SHARE_MAGIC, msg_type, round_ & 0xFFFF, array.ndim, elem_bytes, 0)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return head + dims + array.astype(dtype).tobytes()


def unpack_share(buf: bytes) -> np.ndarray:
    magic, _, _, rank, width, _ = SHARE_HEADER.unpack_from(buf)
    if magic != SHARE_MAGIC:
        raise ProtocolError(f"bad share magic {magic!r}")
    if width not in (4, 8):
        raise ProtocolError(f"bad share element width {width}")
    off = SHARE_HEADER.size
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    data = np.frombuffer(buf, dtype="<u4" if width == 4 else "<u8", offset=off)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ProtocolError(f"share payload has {data.size} elements, header says {shape}")
    return data.astype(np.uint64).reshape(shape)


def share_wire_size(shape, elem_bytes: int = 8) -> int:
    return SHARE_HEADER.size + 4 * len(shape) + elem_bytes * int(np.prod(shape, dtype=np.int64))


def pack_message(meta: dict, arrays=()) -> bytes:
    """JSON metadata plus raw arrays; used for control, keys-free setup and
    cleartext results."""
    arrays = [np.ascontiguousarray(a) for a in arrays]
    meta = dict(meta)
    meta["_arrays"] = [[a.dtype.str, list(a.shape)] for a in arrays]
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(head)) + head + b"".join(a.tobytes() for a in arrays)


def unpack_message(buf: bytes) -> tuple[dict, list[np.ndarray]]:
    (n,) = struct.unpack_from("<I", buf)
    meta = json.loads(buf[4:4 + n])
    off = 4 + n
    arrays = []
    for dtype, shape in meta.pop("_arrays"):
        dt = np.dtype(dtype)
        count = int(np.prod(shape, dtype=np.int64))
        arrays.append(np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).copy())
        off += count * dt.itemsize
    if off != len(buf):
        raise ProtocolError("trailing bytes in message")
    return meta, arrays


# ---------------------------------------------------------------------------
# Ledger

@dataclass
class LedgerEntry:
    direction: str  # "sent" | "recv"
    phase: str
    frame_type: str
    round: int
    nbytes: int


@dataclass
class Ledger:
    """Per-party record of frames and of time spent in each phase."""

    party_id: int
    entries: list = field(default_factory=list)
    times: dict = field(default_factory=lambda: defaultdict(float))
    iterations: int = 0

    def record(self, direction, phase, frame_type, round_, nbytes):
        self.entries.append(LedgerEntry(direction, Phase(phase).name.lower(),
                                        FrameType(frame_type).name.lower(), round_, nbytes))

    @contextmanager
    def phase(self, name: str):
        t0 = time.monotonic()
        try:
            yield
        finally:
            self.times[name] += time.monotonic() - t0

    def bytes(self, direction: str = "sent", phase: str | None = None, frame_type: str | None = None) -> int:
        return sum(e.nbytes for e in self.entries
                   if e.direction == direction
                   and (phase is None or e.phase == phase)
                   and (frame_type is None or e.frame_type == frame_type))

    def report(self) -> dict:
        out = {}
        phases = {e.phase for e in self.entries} | set(self.times)
        for ph in sorted(phases):
            out[ph] = (self.bytes("sent", ph), self.bytes("recv", ph), float(self.times.get(ph, 0.0)))
        return out

    def records(self):
        """Line-oriented dumps for the raw ledger file."""
        for i, e in enumerate(self.entries):
            yield {"party": self.party_id, "seq": i, **e.__dict__}


# ---------------------------------------------------------------------------
# Transports

class Transport:
    """Ordered reliable duplex byte-frame channel."""

    def send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def recv_bytes(self, timeout: float | None) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LoopbackTransport(Transport):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self.inbox, self.outbox = inbox, outbox

    @classmethod
    def pair(cls):
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b), cls(b, a)

    def send_bytes(self, data: bytes) -> None:
        self.outbox.put(bytes(data))

    def recv_bytes(self, timeout):
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"no frame within {timeout} s") from None
        if isinstance(item, Exception):
            raise item
        return item


class TcpTransport(Transport):
    """Length-delimited frames over a TCP socket, drained by a reader thread."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.inbox: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _recv_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise TransportError("connection closed by peer")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _read_loop(self):
        try:
            while True:
                head = self._recv_exact(FRAME_HEADER.size)
                length = FRAME_HEADER.unpack(head)[5]
                self.inbox.put(head + self._recv_exact(length))
        except (OSError, TransportError, struct.error) as exc:
            self.inbox.put(TransportError(str(exc)))

    def send_bytes(self, data: bytes) -> None:
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise TransportError(str(exc)) from None

    def recv_bytes(self, timeout):
        try:
            item = self.inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"no frame within {timeout} s") from None
        if isinstance(item, Exception):
            self.inbox.put(item)
            raise item
        return item

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    @classmethod
    def pair(cls, host: str = "127.0.0.1", port: int = 0, timeout: float = 10.0):
        """Listen on ``host:port``, connect to it, return (party1, party2) ends."""
        server = socket.create_server((host, port))
        server.settimeout(timeout)
        try:
            addr = server.getsockname()
            client = socket.create_connection(addr[:2], timeout=timeout)
            conn, _ = server.accept()
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from None
        finally:
            server.close()
        client.settimeout(None)
        conn.settimeout(None)
        return cls(client), cls(conn)


def transport_pair(spec: str = "loopback"):
    """``"loopback"`` or ``"tcp:host:port"`` (port 0 picks a free one)."""
    if spec == "loopback":
        return LoopbackTransport.pair()
    if spec.startswith("tcp:"):
        host, _, port = spec[4:].rpartition(":")
        try:
            port = int(port)
        except ValueError:
            raise ValueError(f"bad tcp transport spec {spec!r}") from None
        return TcpTransport.pair(host or "127.0.0.1", port)
    raise ValueError(f"unknown transport {spec!r}")


# ---------------------------------------------------------------------------
# Endpoint

class Endpoint:
    """One party's side of a session: framing, round checks, accounting and
    a running transcript digest."""

    def __init__(self, party_id: int, transport: Transport, session_id: int = 1,
                 timeout: float | None = 120.0, keep_frames: bool = False):
        self.party_id = party_id
        self.transport = transport
        self.session_id = session_id
        self.timeout = timeout
        self.ledger = Ledger(party_id)
        self.send_round = 0
        self.recv_round = 0
        self.phase = Phase.CONTROL
        self.digest = hashlib.sha256()
        self.frames = [] if keep_frames else None
        self.cpu_seconds = 0.0
        self._cpu_start = None

    def _tick(self):
        # CPU time of the thread that owns this endpoint, sampled at every frame
        now = time.thread_time()
        if self._cpu_start is None:
            self._cpu_start = now
        self.cpu_seconds = now - self._cpu_start

    def _log(self, direction, frame):
        self.digest.update(direction.encode() + frame)
        if self.frames is not None:
            self.frames.append((direction, frame))

    def send(self, frame_type: FrameType, payload: bytes, phase: Phase | None = None) -> None:
        phase = self.phase if phase is None else phase
        head = FRAME_HEADER.pack(FRAME_MAGIC, self.session_id, self.send_round, int(phase), int(frame_type), len(payload))
        frame = head + payload
        self._tick()
        # account before handing the frame over, so the peer never observes a stale ledger
        self.ledger.record("sent", phase, frame_type, self.send_round, len(frame))
        self._log("s", frame)
        self.send_round += 1
        self.transport.send_bytes(frame)

    def recv(self, *expected: FrameType) -> tuple[FrameType, bytes]:
        self._tick()
        frame = self.transport.recv_bytes(self.timeout)
        magic, session, round_, phase, ftype, length = FRAME_HEADER.unpack_from(frame)
        if magic != FRAME_MAGIC:
            raise ProtocolError(f"party {self.party_id}: bad frame magic {magic!r}")
        if session != self.session_id:
            raise ProtocolError(f"party {self.party_id}: frame for session {session}, expected {self.session_id}")
        if round_ != self.recv_round:
            raise ProtocolError(f"party {self.party_id}: desynchronized at round {self.recv_round} (peer sent round {round_})")
        if length != len(frame) - FRAME_HEADER.size:
            raise ProtocolError(f"party {self.party_id}: truncated frame at round {round_}")
        self.ledger.record("recv", phase, ftype, round_, len(frame))
        self._log("r", frame)
        self.recv_round += 1
        ftype = FrameType(ftype)
        payload = frame[FRAME_HEADER.size:]
        if ftype == FrameType.ERROR:
            meta, _ = unpack_message(payload)
            cls = HandshakeError if meta.get("kind") == "handshake" else ProtocolError
            raise cls(f"peer reported: {meta.get('message')}")
        if expected and ftype not in expected:
            raise ProtocolError(f"party {self.party_id}: expected {[e.name for e in expected]} at round {round_}, got {ftype.name}")
        return ftype, payload

    def send_message(self, frame_type, meta, arrays=(), phase=None):
        self.send(frame_type, pack_message(meta, arrays), phase)

    def recv_message(self, *expected):
        _, payload = self.recv(*expected)
        return unpack_message(payload)

    def transcript_digest(self) -> str:
        return self.digest.hexdigest()

    def close(self):
        self.transport.close()
