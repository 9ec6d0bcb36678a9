"""Delivery channels between publishers and the subscriber.

Three reference transports ship with the harness:

``loopback``
    in-process bounded queue, exactly-once and FIFO per producer.
``loopback-faulty``
    the same queue behind a seeded fault injector (drop, duplicate,
    reorder) that keeps a ledger of what it did.
``tcp``
    length-prefixed frames over TCP, Nagle disabled.

Adapters for real brokers plug in by providing ``connect()`` returning an
object with ``publish``/``publish_batch``/``close`` and ``subscribe()``
yielding :class:`~wrench.codec.FrameBatch` objects.
"""

from __future__ import annotations

import collections
import logging
import selectors
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .codec import END_OF_STREAM, FrameBatch, split_frames

log = logging.getLogger(__name__)

KINDS = ("loopback", "loopback-faulty", "tcp")


class TransportError(RuntimeError):
    pass


class ConnectionClosed(TransportError):
    pass


class StreamAborted(TransportError):
    """A publisher connection ended without a clean end-of-stream."""


@dataclass(frozen=True)
class FaultParams:
    drop_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_prob: float = 0.0
    reorder_window: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_prob", "dup_prob", "reorder_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.reorder_window < 1:
            raise ValueError("reorder_window must be >= 1")
        if self.reorder_prob > 0 and self.reorder_window < 2:
            raise ValueError("reorder_window must be >= 2 when reorder_prob > 0")


@dataclass(frozen=True)
class TransportConfig:
    kind: str = "loopback"
    endpoint: Optional[str] = None
    fault: FaultParams = field(default_factory=FaultParams)
    queue_capacity: int = 65536

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transport {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.kind == "tcp":
            if not self.endpoint:
                raise ValueError("tcp transport needs an endpoint host:port")
            parse_endpoint(self.endpoint)


def parse_endpoint(endpoint: str) -> Tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    if int(port) > 65535:
        raise ValueError(f"port out of range in {endpoint!r}")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------------------
# loopback


class _Channel:
    """Bounded multi-producer single-consumer queue of frame batches.

    Capacity is counted in frames; a producer blocks while the queue is
    non-empty and its batch would overflow it.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: Deque[FrameBatch] = collections.deque()
        self._pending = 0
        self._cond = threading.Condition()
        self._producers = 0
        self._closed = False

    def put(self, batch: FrameBatch) -> None:
        n = len(batch)
        with self._cond:
            while self._pending and self._pending + n > self.capacity:
                self._cond.wait()
            self._items.append(batch)
            self._pending += n
            self._cond.notify_all()

    def get_all(self) -> Optional[List[FrameBatch]]:
        """Everything queued, blocking while empty; ``None`` at end of run."""
        with self._cond:
            while not self._items:
                if self._closed and self._producers == 0:
                    return None
                self._cond.wait()
            items = list(self._items)
            self._items.clear()
            self._pending = 0
            self._cond.notify_all()
            return items

    def attach(self) -> None:
        with self._cond:
            if self._closed:
                raise ConnectionClosed("transport is closed")
            self._producers += 1

    def detach(self) -> None:
        with self._cond:
            self._producers -= 1
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class LoopbackConnection:
    def __init__(self, transport: "LoopbackTransport"):
        self._transport = transport
        self._channel = transport._channel
        self._channel.attach()
        self.open = True
        self.sent = 0

    def publish(self, frame: bytes) -> bool:
        return self.publish_batch(FrameBatch.from_frames([frame])) == 1

    def publish_batch(self, batch: FrameBatch) -> int:
        if not self.open:
            raise ConnectionClosed("connection is closed")
        if len(batch):
            self._deliver(batch)
        self.sent += len(batch)
        return len(batch)

    def _deliver(self, batch: FrameBatch) -> None:
        self._channel.put(batch)

    def close(self) -> None:
        if self.open:
            self.open = False
            self._channel.detach()

    def abort(self) -> None:
        """Close without a clean end of stream."""
        if self.open:
            self._transport.aborted += 1
            self.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LoopbackTransport:
    """In-process transport; exactly-once and FIFO per connection."""

    kind = "loopback"

    def __init__(self, queue_capacity: int = 65536):
        self._channel = _Channel(queue_capacity)
        self.aborted = 0

    def connect(self, stream_id: Optional[int] = None) -> LoopbackConnection:
        return LoopbackConnection(self)

    def close(self) -> None:
        """No further connections; the subscription ends once they all close."""
        self._channel.close()

    def subscribe(self) -> Iterator[FrameBatch]:
        while True:
            items = self._channel.get_all()
            if items is None:
                break
            yield from items
        if self.aborted:
            raise StreamAborted(f"{self.aborted} connection(s) closed mid-stream")


# ---------------------------------------------------------------------------
# fault injection


@dataclass
class FaultLedger:
    """What the injector did, per stream and in total.

    ``displaced`` counts held-back frames that a later frame of the same
    stream overtook; a receiver sees exactly these as out of order.
    """

    offered: int = 0
    delivered: int = 0
    dropped: int = 0
    duplicated: int = 0
    held: int = 0
    displaced: int = 0
    per_stream: Dict[int, Dict[str, int]] = field(default_factory=dict)

    def _bump(self, stream: int, key: str, n: int = 1) -> None:
        setattr(self, key, getattr(self, key) + n)
        s = self.per_stream.get(stream)
        if s is None:
            s = self.per_stream[stream] = dict.fromkeys(("offered", "delivered", "dropped", "duplicated", "held", "displaced"), 0)
        s[key] += n

    def merge(self, other: "FaultLedger") -> None:
        for stream, counts in other.per_stream.items():
            for key, n in counts.items():
                self._bump(stream, key, n)

    def as_dict(self) -> Dict[str, int]:
        return {k: getattr(self, k) for k in ("offered", "delivered", "dropped", "duplicated", "held", "displaced")}


class FaultyConnection(LoopbackConnection):
    def __init__(self, transport: "FaultyLoopbackTransport", key: int):
        super().__init__(transport)
        p = transport.fault
        self.params = p
        ss = np.random.SeedSequence(entropy=p.seed % 2**64, spawn_key=(int(key),))
        self._rng = np.random.Generator(np.random.PCG64(ss))
        self.ledger = FaultLedger()
        self._held: List[list] = []  # [countdown, frame, copies, stream, seq]
        self._max_out: Dict[int, int] = {}
        self._ledger_lock = transport._ledger_lock
        self._shared = transport.ledger

    def _emit(self, out: List[bytes], frame: bytes, copies: int, stream: int, seq: int) -> None:
        led = self.ledger
        top = self._max_out.get(stream, -1)
        if seq < top:
            led._bump(stream, "displaced")
        else:
            self._max_out[stream] = seq
        for _ in range(copies):
            out.append(frame)
        led._bump(stream, "delivered", copies)

    def _deliver(self, batch: FrameBatch) -> None:
        p = self.params
        n = len(batch)
        # four uniforms per frame: drop, duplicate, reorder, hold length
        u = self._rng.random((n, 4)).tolist()
        buf = np.frombuffer(batch.data, dtype=np.uint8)
        starts = np.asarray(batch.starts, dtype=np.int64)
        streams = buf[starts[:, None] + np.arange(3, 7)].copy().view("<u4").ravel().tolist()
        seqs = buf[starts[:, None] + np.arange(7, 15)].copy().view("<u8").ravel().tolist()
        out: List[bytes] = []
        led = self.ledger
        for i, frame in enumerate(batch.frames()):
            sid, seq = streams[i], seqs[i]
            ud, uu, ur, uh = u[i]
            led._bump(sid, "offered")
            if ud < p.drop_prob:
                led._bump(sid, "dropped")
            else:
                copies = 2 if uu < p.dup_prob else 1
                if copies == 2:
                    led._bump(sid, "duplicated")
                if ur < p.reorder_prob:
                    led._bump(sid, "held")
                    self._held.append([1 + int(uh * (p.reorder_window - 1)), frame, copies, sid, seq, True])
                else:
                    self._emit(out, frame, copies, sid, seq)
            self._tick(out)
        if out:
            self._channel.put(FrameBatch.from_frames(out))

    def _tick(self, out: List[bytes]) -> None:
        if not self._held:
            return
        keep = []
        for h in self._held:
            if h[5]:  # just held by this very frame; start counting next time
                h[5] = False
                keep.append(h)
                continue
            h[0] -= 1
            if h[0] <= 0:
                self._emit(out, h[1], h[2], h[3], h[4])
            else:
                keep.append(h)
        self._held = keep

    def _flush_held(self) -> None:
        out: List[bytes] = []
        for h in self._held:
            self._emit(out, h[1], h[2], h[3], h[4])
        self._held = []
        if out:
            self._channel.put(FrameBatch.from_frames(out))

    def close(self) -> None:
        if self.open:
            self._flush_held()
            with self._ledger_lock:
                self._shared.merge(self.ledger)
        super().close()


class FaultyLoopbackTransport(LoopbackTransport):
    """Loopback with seeded drop/duplicate/reorder faults.

    Each connection draws from its own generator keyed by ``stream_id`` (or
    connection order), so fault sequences are reproducible. ``ledger`` is
    complete once every connection has closed.
    """

    kind = "loopback-faulty"

    def __init__(self, fault: FaultParams, queue_capacity: int = 65536):
        super().__init__(queue_capacity)
        self.fault = fault
        self.ledger = FaultLedger()
        self._ledger_lock = threading.Lock()
        self._next_key = 0

    def connect(self, stream_id: Optional[int] = None) -> FaultyConnection:
        if stream_id is None:
            with self._ledger_lock:
                key = self._next_key
                self._next_key += 1
        else:
            key = stream_id
        return FaultyConnection(self, key)


# ---------------------------------------------------------------------------
# tcp


class TcpConnection:
    def __init__(self, endpoint: str, nodelay: bool = True, timeout: float = 10.0, retry_s: float = 5.0):
        host, port = parse_endpoint(endpoint)
        deadline = time.monotonic() + retry_s
        while True:
            try:
                self._sock = socket.create_connection((host, port), timeout=timeout)
                break
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise TransportError(f"cannot connect to {endpoint}: {exc}") from exc
                time.sleep(0.05)
        self._sock.settimeout(None)
        if nodelay:
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.open = True
        self.sent = 0

    def publish(self, frame: bytes) -> bool:
        return self.publish_batch(FrameBatch.from_frames([frame])) == 1

    def publish_batch(self, batch: FrameBatch) -> int:
        if not self.open:
            raise ConnectionClosed("connection is closed")
        try:
            self._sock.sendall(batch.data)
        except OSError as exc:
            self.open = False
            raise TransportError(f"send failed: {exc}") from exc
        self.sent += len(batch)
        return len(batch)

    def close(self) -> None:
        if not self.open:
            return
        self.open = False
        try:
            self._sock.sendall(END_OF_STREAM)
            self._sock.shutdown(socket.SHUT_WR)
            # wait for the peer to finish reading
            self._sock.settimeout(5.0)
            while self._sock.recv(4096):
                pass
        except OSError:
            pass
        finally:
            self._sock.close()

    def abort(self) -> None:
        if self.open:
            self.open = False
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TcpTransport:
    """Length-prefixed frames over TCP.

    Publishers call :meth:`connect`. The subscriber calls :meth:`bind` (or
    just :meth:`subscribe`) and receives until ``expected_connections``
    publishers have connected and every connection has ended.
    """

    kind = "tcp"

    def __init__(self, endpoint: str, expected_connections: int = 1, nodelay: bool = True, idle_timeout: Optional[float] = None):
        self.endpoint = endpoint
        self.expected_connections = expected_connections
        self.nodelay = nodelay
        self.idle_timeout = idle_timeout
        self._listener: Optional[socket.socket] = None
        self.aborted = 0
        self._stop = False

    @property
    def address(self) -> Tuple[str, int]:
        if self._listener is None:
            return parse_endpoint(self.endpoint)
        return self._listener.getsockname()[:2]

    def bind(self) -> Tuple[str, int]:
        if self._listener is None:
            host, port = parse_endpoint(self.endpoint)
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((host, port))
            srv.listen(64)
            srv.setblocking(False)
            self._listener = srv
        return self.address

    def connect(self, stream_id: Optional[int] = None) -> TcpConnection:
        host, port = self.address
        return TcpConnection(f"{host}:{port}", nodelay=self.nodelay)

    def stop(self) -> None:
        self._stop = True

    def subscribe(self) -> Iterator[FrameBatch]:
        self.bind()
        assert self._listener is not None
        sel = selectors.DefaultSelector()
        sel.register(self._listener, selectors.EVENT_READ, None)
        buffers: Dict[socket.socket, bytearray] = {}
        accepted = 0
        finished = 0
        last_activity = time.monotonic()
        try:
            while True:
                if accepted >= self.expected_connections and finished == accepted:
                    break
                if self._stop:
                    break
                events = sel.select(timeout=0.2)
                if not events:
                    if self.idle_timeout is not None and time.monotonic() - last_activity > self.idle_timeout:
                        raise TransportError(f"no traffic for {self.idle_timeout} s")
                    continue
                last_activity = time.monotonic()
                for key, _ in events:
                    if key.data is None:
                        try:
                            conn, _addr = self._listener.accept()
                        except BlockingIOError:
                            continue
                        conn.setblocking(False)
                        if self.nodelay:
                            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                        buffers[conn] = bytearray()
                        sel.register(conn, selectors.EVENT_READ, "peer")
                        accepted += 1
                        continue
                    conn = key.fileobj
                    buf = buffers[conn]
                    try:
                        chunk = conn.recv(1 << 20)
                    except (BlockingIOError, InterruptedError):
                        continue
                    except OSError:
                        chunk = b""
                    eos = False
                    if chunk:
                        buf += chunk
                        starts, sizes, end, eos = split_frames(buf)
                        if starts:
                            first = starts[0] - 4
                            data = bytes(buf[first : starts[-1] + sizes[-1]])
                            st = np.asarray(starts, dtype=np.int64) - first
                            yield FrameBatch(data, st, np.asarray(sizes, dtype=np.int64))
                        del buf[:end]
                    if eos or not chunk:
                        if not eos:
                            self.aborted += 1
                            log.warning("publisher connection closed mid-stream (%d bytes pending)", len(buf))
                        sel.unregister(conn)
                        conn.close()
                        del buffers[conn]
                        finished += 1
        finally:
            for conn in list(buffers):
                conn.close()
            sel.close()
            self._listener.close()
            self._listener = None
        if self.aborted:
            raise StreamAborted(f"{self.aborted} connection(s) closed mid-stream")

    def close(self) -> None:
        pass


def make_transport(config: TransportConfig, expected_connections: int = 1):
    if config.kind == "loopback":
        return LoopbackTransport(config.queue_capacity)
    if config.kind == "loopback-faulty":
        return FaultyLoopbackTransport(config.fault, config.queue_capacity)
    assert config.endpoint is not None
    return TcpTransport(config.endpoint, expected_connections=expected_connections)


def iter_frames(batches) -> Iterator[bytes]:
    """Flatten a stream of batches into individual frames."""
    for b in batches:
        yield from b.frames()


def publish(connection, frame: bytes) -> bool:
    return connection.publish(frame)


def subscribe(transport) -> Iterator[FrameBatch]:
    return transport.subscribe()

