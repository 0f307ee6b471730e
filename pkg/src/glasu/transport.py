"""Wire messages, framing, communication accounting and the two transports.

Frame layout (all integers little-endian)::

    "GLSU" | u8 version | u8 tag | u32 payload length | payload

Index sets are ``u32 count`` followed by ``count`` u32 ids; matrices are
``u32 rows, u32 cols`` followed by row-major f64 values; layer-tagged
payloads prepend a u8 layer index.
"""
from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field, fields
from typing import Union

import numpy as np

from .errors import ProtocolError
from .sampling import LabelMode, LayerPlan

MAGIC = b"GLSU"
VERSION = 1
DEFAULT_PORT = 7431
HEADER = struct.Struct("<4sBBI")
_U32 = struct.Struct("<I")
_U8 = struct.Struct("<B")
_DIMS = struct.Struct("<II")
_CONTROL = struct.Struct("<BI")


class Tag(enum.IntEnum):
    SAMPLE_BROADCAST = 1
    INDEX_UPLOAD = 2
    INDEX_UNION_BROADCAST = 3
    REPR_UPLOAD = 4
    REPR_BROADCAST = 5
    COTANGENT_BROADCAST = 6
    CONTROL = 7
    COTANGENT_UPLOAD = 8


class ControlKind(enum.IntEnum):
    BEGIN = 0
    END = 1
    SHUTDOWN = 2
    HELLO = 3


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a), np.asarray(b)
        return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
    return a == b


class _Message:
    tag: Tag

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(_same(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    __hash__ = None

    @property
    def variant(self) -> str:
        return type(self).__name__


def _index_array(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise ProtocolError("index ids must fit in u32")
    if arr.size > 1 and (np.diff(arr) <= 0).any():
        raise ProtocolError("index sets must be strictly ascending")
    return arr


def _matrix(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ProtocolError(f"matrix payload must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ProtocolError("matrix payload contains non-finite values")
    return arr


@dataclass(eq=False)
class _IndexMessage(_Message):
    ids: np.ndarray

    def __post_init__(self):
        self.ids = _index_array(self.ids)


@dataclass(eq=False)
class SampleBroadcast(_IndexMessage):
    tag = Tag.SAMPLE_BROADCAST


@dataclass(eq=False)
class IndexUpload(_IndexMessage):
    tag = Tag.INDEX_UPLOAD


@dataclass(eq=False)
class IndexUnionBroadcast(_IndexMessage):
    tag = Tag.INDEX_UNION_BROADCAST


@dataclass(eq=False)
class _LayerMessage(_Message):
    layer: int
    matrix: np.ndarray

    def __post_init__(self):
        if not 0 <= int(self.layer) <= 0xFF:
            raise ProtocolError(f"layer index {self.layer} does not fit in u8")
        self.layer = int(self.layer)
        self.matrix = _matrix(self.matrix)


@dataclass(eq=False)
class ReprUpload(_LayerMessage):
    tag = Tag.REPR_UPLOAD


@dataclass(eq=False)
class ReprBroadcast(_LayerMessage):
    tag = Tag.REPR_BROADCAST


@dataclass(eq=False)
class _MatrixMessage(_Message):
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = _matrix(self.matrix)


@dataclass(eq=False)
class CotangentUpload(_MatrixMessage):
    tag = Tag.COTANGENT_UPLOAD


@dataclass(eq=False)
class CotangentBroadcast(_MatrixMessage):
    tag = Tag.COTANGENT_BROADCAST


@dataclass(eq=False)
class Control(_Message):
    kind: ControlKind
    value: int = 0
    tag = Tag.CONTROL

    def __post_init__(self):
        self.kind = ControlKind(self.kind)


Message = Union[SampleBroadcast, IndexUpload, IndexUnionBroadcast, ReprUpload, ReprBroadcast,
                CotangentUpload, CotangentBroadcast, Control]

_BY_TAG = {cls.tag: cls for cls in (SampleBroadcast, IndexUpload, IndexUnionBroadcast, ReprUpload,
                                     ReprBroadcast, CotangentUpload, CotangentBroadcast, Control)}


def _pack_matrix(m: np.ndarray) -> bytes:
    return _DIMS.pack(*m.shape) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def serialize(msg: Message) -> bytes:
    if isinstance(msg, _IndexMessage):
        payload = _U32.pack(msg.ids.size) + msg.ids.astype("<u4").tobytes()
    elif isinstance(msg, _LayerMessage):
        payload = _U8.pack(msg.layer) + _pack_matrix(msg.matrix)
    elif isinstance(msg, _MatrixMessage):
        payload = _pack_matrix(msg.matrix)
    elif isinstance(msg, Control):
        payload = _CONTROL.pack(int(msg.kind), msg.value)
    else:
        raise ProtocolError(f"cannot serialize {type(msg).__name__}")
    return HEADER.pack(MAGIC, VERSION, int(msg.tag), len(payload)) + payload


def _need(buf: bytes, offset: int, size: int, what: str) -> None:
    if offset + size > len(buf):
        raise ProtocolError(f"truncated {what} at offset {offset}: need {size} bytes, "
                            f"have {len(buf) - offset}")


def _unpack_matrix(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    _need(buf, offset, _DIMS.size, "matrix dims")
    rows, cols = _DIMS.unpack_from(buf, offset)
    offset += _DIMS.size
    _need(buf, offset, rows * cols * 8, "matrix values")
    m = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset)
    return m.astype(np.float64).reshape(rows, cols), offset + rows * cols * 8


def frame_length(header: bytes) -> int:
    """Total frame size announced by a 10-byte header."""
    magic, version, _, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version} at offset 4")
    return HEADER.size + length


def deserialize(buf: bytes) -> Message:
    buf = bytes(buf)
    _need(buf, 0, HEADER.size, "frame header")
    magic, version, tag, length = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version} at offset 4")
    try:
        cls = _BY_TAG[Tag(tag)]
    except ValueError:
        raise ProtocolError(f"unknown message tag {tag} at offset 5") from None
    start = HEADER.size
    _need(buf, start, length, "payload")
    if len(buf) != start + length:
        raise ProtocolError(f"{len(buf) - start - length} trailing bytes after payload "
                            f"at offset {start + length}")
    end = start + length
    payload = buf[:end]
    off = start
    if issubclass(cls, _IndexMessage):
        _need(payload, off, _U32.size, "index count")
        (count,) = _U32.unpack_from(payload, off)
        off += _U32.size
        _need(payload, off, 4 * count, "index ids")
        ids = np.frombuffer(payload, dtype="<u4", count=count, offset=off).astype(np.int64)
        off += 4 * count
        msg = cls(ids)
    elif issubclass(cls, _LayerMessage):
        _need(payload, off, 1, "layer index")
        (layer,) = _U8.unpack_from(payload, off)
        matrix, off = _unpack_matrix(payload, off + 1)
        msg = cls(layer, matrix)
    elif issubclass(cls, _MatrixMessage):
        matrix, off = _unpack_matrix(payload, off)
        msg = cls(matrix)
    else:
        _need(payload, off, _CONTROL.size, "control payload")
        kind, value = _CONTROL.unpack_from(payload, off)
        off += _CONTROL.size
        try:
            msg = Control(ControlKind(kind), value)
        except ValueError:
            raise ProtocolError(f"unknown control kind {kind} at offset {start}") from None
    if off != end:
        raise ProtocolError(f"payload length {length} disagrees with contents "
                            f"(parsed {off - start} bytes)")
    return msg


# -- accounting --------------------------------------------------------------

VARIANTS = ("SampleBroadcast", "IndexUpload", "IndexUnionBroadcast", "ReprUpload",
            "ReprBroadcast", "CotangentUpload", "CotangentBroadcast")
AGGREGATION_VARIANTS = ("ReprUpload", "ReprBroadcast")


@dataclass
class RoundRecord:
    counts: Counter = field(default_factory=Counter)
    bytes: Counter = field(default_factory=Counter)


class CommLedger:
    """Per-round message and byte counts, keyed by message variant.

    One upload or one broadcast is one logical message; a broadcast's bytes
    are charged once per receiver. Control frames are not counted.
    """

    def __init__(self):
        self.rounds: dict[int, RoundRecord] = {}
        self._lock = threading.Lock()

    def record(self, t: int, msg: Message, nbytes: int, receivers: int = 1) -> None:
        if isinstance(msg, Control):
            return
        with self._lock:
            rec = self.rounds.setdefault(t, RoundRecord())
            rec.counts[msg.variant] += 1
            rec.bytes[msg.variant] += nbytes * receivers

    def counts(self) -> Counter:
        total = Counter()
        for rec in self.rounds.values():
            total.update(rec.counts)
        return total

    def byte_totals(self) -> Counter:
        total = Counter()
        for rec in self.rounds.values():
            total.update(rec.bytes)
        return total

    @property
    def total_messages(self) -> int:
        return sum(self.counts().values())

    @property
    def total_bytes(self) -> int:
        return sum(self.byte_totals().values())

    def summary(self) -> dict:
        return {"rounds": len(self.rounds), "messages": dict(self.counts()),
                "bytes": dict(self.byte_totals()), "total_messages": self.total_messages,
                "total_bytes": self.total_bytes}


def expected_counts(plan: LayerPlan, M: int, T: int, Q: int,
                    label_mode: LabelMode = LabelMode.ALL_CLIENTS) -> Counter:
    """Message counts the protocol must produce over ``T`` rounds.

    ``Q`` does not enter: local iterations after the first reuse cached
    representations and send nothing.
    """
    single = LabelMode(label_mode) is LabelMode.SINGLE_HOLDER
    unions = len(plan.union_levels)
    per_round = Counter({
        "SampleBroadcast": 1,
        "IndexUpload": unions * M + (1 if single else 0),
        "IndexUnionBroadcast": unions,
        "ReprUpload": plan.K * M,
        "ReprBroadcast": plan.K,
        "CotangentUpload": 1 if single else 0,
        "CotangentBroadcast": 1 if single else 0,
    })
    return Counter({k: v * T for k, v in per_round.items() if v})


def aggregation_messages_per_update(counts: Counter, T: int, Q: int) -> float:
    return sum(counts[v] for v in AGGREGATION_VARIANTS) / (T * Q)


# -- links -------------------------------------------------------------------

class ServerLink:
    """Server side of a star topology; subclasses move raw frames."""

    def __init__(self, M: int, ledger: CommLedger | None = None):
        self.M = M
        self.ledger = ledger if ledger is not None else CommLedger()
        self.round = 0

    def _send_frame(self, m: int, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, m: int) -> bytes:
        raise NotImplementedError

    def recv(self, m: int) -> Message:
        frame = self._recv_frame(m)
        msg = deserialize(frame)
        self.ledger.record(self.round, msg, len(frame))
        return msg

    def broadcast(self, msg: Message) -> None:
        frame = serialize(msg)
        for m in range(self.M):
            self._send_frame(m, frame)
        self.ledger.record(self.round, msg, len(frame), receivers=self.M)

    def close(self) -> None:
        pass


class ClientLink:
    def __init__(self, m: int):
        self.m = m

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> bytes:
        raise NotImplementedError

    def send(self, msg: Message) -> None:
        self._send_frame(serialize(msg))

    def recv(self) -> Message:
        return deserialize(self._recv_frame())

    def close(self) -> None:
        pass


_CLOSED = b""
RECV_TIMEOUT = 120.0


def _queue_get(q: queue.Queue, who: str) -> bytes:
    try:
        frame = q.get(timeout=RECV_TIMEOUT)
    except queue.Empty:
        raise ProtocolError(f"timed out waiting for {who}") from None
    if frame == _CLOSED:
        raise ProtocolError(f"{who} closed the connection")
    return frame


class InProcServerLink(ServerLink):
    def __init__(self, M: int, ledger: CommLedger | None = None):
        super().__init__(M, ledger)
        self.down = [queue.Queue() for _ in range(M)]
        self.up = [queue.Queue() for _ in range(M)]

    def _send_frame(self, m, frame):
        self.down[m].put(frame)

    def _recv_frame(self, m):
        return _queue_get(self.up[m], f"client {m}")

    def close(self):
        for q in self.down:
            q.put(_CLOSED)


class InProcClientLink(ClientLink):
    def __init__(self, m: int, server: InProcServerLink):
        super().__init__(m)
        self._down = server.down[m]
        self._up = server.up[m]

    def _send_frame(self, frame):
        self._up.put(frame)

    def _recv_frame(self):
        return _queue_get(self._down, "server")

    def close(self):
        self._up.put(_CLOSED)


def inproc_pair(M: int, ledger: CommLedger | None = None):
    server = InProcServerLink(M, ledger)
    return server, [InProcClientLink(m, server) for m in range(M)]


def _recv_exact(sock: socket.socket, n: int, who: str) -> bytes:
    chunks = []
    while n:
        try:
            chunk = sock.recv(n)
        except socket.timeout:
            raise ProtocolError(f"timed out waiting for {who}") from None
        except OSError as exc:
            raise ProtocolError(f"connection to {who} failed: {exc}") from None
        if not chunk:
            raise ProtocolError(f"{who} closed the connection")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def _read_frame(sock: socket.socket, who: str) -> bytes:
    head = _recv_exact(sock, HEADER.size, who)
    total = frame_length(head)
    return head + _recv_exact(sock, total - HEADER.size, who)


class TcpServerLink(ServerLink):
    """Listens first; :meth:`accept` then waits for ``M`` clients to say hello."""

    def __init__(self, M: int, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 ledger: CommLedger | None = None):
        super().__init__(M, ledger)
        try:
            self.listener = socket.create_server((host, port))
        except OSError as exc:
            raise ProtocolError(f"cannot listen on {host}:{port}: {exc}") from None
        self.listener.settimeout(RECV_TIMEOUT)
        self.address = self.listener.getsockname()[:2]
        self.conns: list[socket.socket | None] = [None] * M

    def accept(self) -> None:
        for _ in range(self.M):
            try:
                conn, _ = self.listener.accept()
            except socket.timeout:
                raise ProtocolError("timed out waiting for clients to connect") from None
            conn.settimeout(RECV_TIMEOUT)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = deserialize(_read_frame(conn, "connecting client"))
            if not (isinstance(hello, Control) and hello.kind is ControlKind.HELLO):
                raise ProtocolError(f"expected HELLO, got {hello.variant}")
            m = hello.value
            if not 0 <= m < self.M or self.conns[m] is not None:
                raise ProtocolError(f"bad or duplicate client id {m}")
            self.conns[m] = conn

    def _send_frame(self, m, frame):
        try:
            self.conns[m].sendall(frame)
        except OSError as exc:
            raise ProtocolError(f"send to client {m} failed: {exc}") from None

    def _recv_frame(self, m):
        return _read_frame(self.conns[m], f"client {m}")

    def close(self):
        for conn in self.conns:
            if conn is not None:
                conn.close()
        self.listener.close()


class TcpClientLink(ClientLink):
    def __init__(self, m: int, host: str, port: int):
        super().__init__(m)
        try:
            self.sock = socket.create_connection((host, port), timeout=RECV_TIMEOUT)
        except OSError as exc:
            raise ProtocolError(f"client {m} cannot reach {host}:{port}: {exc}") from None
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.send(Control(ControlKind.HELLO, m))

    def _send_frame(self, frame):
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise ProtocolError(f"client {self.m} send failed: {exc}") from None

    def _recv_frame(self):
        return _read_frame(self.sock, "server")

    def close(self):
        self.sock.close()
