"""Binary notification format and length-prefixed framing.

Layout (little-endian, 29-byte header)::

    off  size  field
      0     1  version      (1)
      1     1  priority     (0 = high)
      2     1  event_type
      3     4  stream_id
      7     8  sequence
     15     8  send_ts_ns   (wall clock, ns since the Unix epoch)
     23     4  symbol_id
     27     2  attr_count
     29     -  payload

The payload is filler: the 8 little-endian bytes of ``stream_id ^ sequence``
repeated, truncated to ``payload - 1`` bytes, then one checksum byte chosen so
that the XOR of every byte in the notification is zero. A notification with
an empty payload has no checksum.

On byte streams each notification travels as a frame: a ``uint32`` length
followed by that many bytes. A zero length marks a clean end of stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, List, NamedTuple, Sequence, Tuple

import numpy as np

VERSION = 1
HEADER_SIZE = 29
MAX_PAYLOAD = 31744
MAX_FRAME = HEADER_SIZE + MAX_PAYLOAD
LENGTH_PREFIX = 4

_HEADER = struct.Struct("<BBBIQQIH")
_PATTERN = struct.Struct("<Q")
_LEN = struct.Struct("<I")
END_OF_STREAM = _LEN.pack(0)

HEADER_DTYPE = np.dtype(
    [
        ("version", "u1"),
        ("priority", "u1"),
        ("event_type", "u1"),
        ("stream_id", "<u4"),
        ("sequence", "<u8"),
        ("send_ts_ns", "<u8"),
        ("symbol_id", "<u4"),
        ("attr_count", "<u2"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE == _HEADER.size

SEND_TS_OFFSET = 15

_H_COLS = np.arange(HEADER_SIZE, dtype=np.int64)
_P_COLS = np.arange(LENGTH_PREFIX, dtype=np.int64)
_TS_COLS = np.arange(SEND_TS_OFFSET, SEND_TS_OFFSET + 8, dtype=np.int64)


class CodecError(ValueError):
    pass


class ShortFrame(CodecError):
    pass


class UnknownVersion(CodecError):
    pass


class CorruptFrame(CodecError):
    pass


class NotificationHeader(NamedTuple):
    stream_id: int = 0
    sequence: int = 0
    send_ts_ns: int = 0
    event_type: int = 0
    priority: int = 0
    symbol_id: int = 0
    attr_count: int = 0
    version: int = VERSION


def _xor_fold(data: bytes) -> int:
    # XOR of all bytes of a <= 32-byte string
    x = int.from_bytes(data, "little")
    x ^= x >> 128
    x ^= x >> 64
    x ^= x >> 32
    x ^= x >> 16
    x ^= x >> 8
    return x & 0xFF


def _filler_xor(pattern: bytes, n: int) -> int:
    full, rem = divmod(n, 8)
    x = _xor_fold(pattern) if full & 1 else 0
    if rem:
        x ^= _xor_fold(pattern[:rem])
    return x


def encode_notification(header: NotificationHeader, total_size: int) -> bytes:
    """Encode ``header`` padded with filler to exactly ``total_size`` bytes."""
    if total_size < HEADER_SIZE:
        raise CodecError(f"total_size {total_size} is smaller than the {HEADER_SIZE}-byte header")
    if total_size > MAX_FRAME:
        raise CodecError(f"total_size {total_size} exceeds {MAX_FRAME}")
    h = header
    try:
        head = _HEADER.pack(h.version, h.priority, h.event_type, h.stream_id, h.sequence, h.send_ts_ns, h.symbol_id, h.attr_count)
    except struct.error as exc:
        raise CodecError(f"header field out of range: {exc}") from None
    payload = total_size - HEADER_SIZE
    if payload == 0:
        return head
    pattern = _PATTERN.pack(h.stream_id ^ h.sequence)
    n = payload - 1
    filler = (pattern * (n // 8 + 1))[:n]
    checksum = _xor_fold(head) ^ _filler_xor(pattern, n)
    return b"".join((head, filler, bytes((checksum,))))


def decode_notification(data: bytes | bytearray | memoryview) -> Tuple[NotificationHeader, int]:
    """Inverse of :func:`encode_notification`; returns ``(header, payload_size)``."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise ShortFrame(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    version, prio, etype, sid, seq, ts, sym, attrs = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnknownVersion(f"unknown version byte {version}")
    payload = len(data) - HEADER_SIZE
    if payload:
        n = payload - 1
        pattern = _PATTERN.pack(sid ^ seq)
        if data[HEADER_SIZE:-1] != (pattern * (n // 8 + 1))[:n]:
            raise CorruptFrame(f"filler mismatch in stream {sid} sequence {seq}")
        if data[-1] != _xor_fold(data[:HEADER_SIZE]) ^ _filler_xor(pattern, n):
            raise CorruptFrame(f"checksum mismatch in stream {sid} sequence {seq}")
    return NotificationHeader(sid, seq, ts, etype, prio, sym, attrs, version), payload


def frame(notification: bytes) -> bytes:
    """Prefix one encoded notification with its length."""
    return _LEN.pack(len(notification)) + notification


# ---------------------------------------------------------------------------
# batches


@dataclass
class FrameBatch:
    """A run of length-prefixed frames held in one buffer.

    ``data`` is exactly the byte-stream form; ``starts``/``sizes`` locate each
    notification body inside it.
    """

    data: bytes
    starts: np.ndarray
    sizes: np.ndarray

    def __len__(self) -> int:
        return len(self.sizes)

    def frame(self, i: int) -> bytes:
        s = int(self.starts[i])
        return self.data[s : s + int(self.sizes[i])]

    def frames(self) -> Iterator[bytes]:
        data = self.data
        for s, n in zip(self.starts.tolist(), self.sizes.tolist()):
            yield data[s : s + n]

    @classmethod
    def from_frames(cls, frames: Sequence[bytes]) -> "FrameBatch":
        sizes = np.fromiter((len(f) for f in frames), dtype=np.int64, count=len(frames))
        data = b"".join(_LEN.pack(len(f)) + f for f in frames)
        starts = np.cumsum(sizes + LENGTH_PREFIX) - sizes
        return cls(data, starts, sizes)

    @classmethod
    def empty(cls) -> "FrameBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(b"", z, z)


def split_frames(data: bytes | bytearray | memoryview, offset: int = 0) -> Tuple[List[int], List[int], int, bool]:
    """Scan length-prefixed frames in ``data`` from ``offset``.

    Returns body starts, body sizes, the offset just past the last complete
    frame, and whether an end-of-stream marker was consumed.
    """
    starts: List[int] = []
    sizes: List[int] = []
    end = len(data)
    unpack = _LEN.unpack_from
    pos = offset
    eos = False
    while pos + LENGTH_PREFIX <= end:
        (n,) = unpack(data, pos)
        if n == 0:
            pos += LENGTH_PREFIX
            eos = True
            break
        if n > MAX_FRAME:
            raise CorruptFrame(f"frame length {n} exceeds {MAX_FRAME}")
        if pos + LENGTH_PREFIX + n > end:
            break
        starts.append(pos + LENGTH_PREFIX)
        sizes.append(n)
        pos += LENGTH_PREFIX + n
    return starts, sizes, pos, eos


_HEAD_CHUNKS = 5  # prefix + header = 33 bytes, padded to 40
_KEEP_RUNS = np.array([True, False, True, False, True, False])
# above this mean filler per frame, per-frame assembly beats the byte gather
_GATHER_MAX_MEAN = 512


def _xor_frames(buf: np.ndarray, starts: np.ndarray, stops: np.ndarray) -> np.ndarray:
    """XOR of ``buf[starts[i]:stops[i]]`` for each ``i`` (ranges non-empty)."""
    idx = np.empty(2 * len(starts), dtype=np.int64)
    idx[0::2] = starts
    idx[1::2] = stops
    if idx[-1] >= len(buf):
        return np.bitwise_xor.reduceat(buf, idx[:-1])[0::2]
    return np.bitwise_xor.reduceat(buf, idx)[0::2]


def encode_batch(headers: np.ndarray, sizes: np.ndarray) -> FrameBatch:
    """Vectorised :func:`encode_notification` over a ``HEADER_DTYPE`` array.

    Produces the same bytes as framing each notification individually.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    n = len(sizes)
    if n == 0:
        return FrameBatch.empty()
    if sizes.min() < HEADER_SIZE or sizes.max() > MAX_FRAME:
        raise CodecError(f"sizes must lie in [{HEADER_SIZE}, {MAX_FRAME}]")
    headers = np.ascontiguousarray(headers, dtype=HEADER_DTYPE)
    fill = np.maximum(sizes - (HEADER_SIZE + 1), 0)
    if fill.sum() > _GATHER_MAX_MEAN * n:
        return _encode_large(headers, sizes, fill)
    reps = (fill + 7) >> 3
    has = sizes > HEADER_SIZE

    # Every frame as whole 8-byte chunks: prefix+header (5), filler pattern
    # (reps), checksum (1). The padding bytes are then squeezed out.
    head = np.zeros((n, 8 * _HEAD_CHUNKS), dtype=np.uint8)
    head[:, :LENGTH_PREFIX] = sizes.astype("<u4").view(np.uint8).reshape(n, 4)
    head[:, LENGTH_PREFIX : LENGTH_PREFIX + HEADER_SIZE] = headers.view(np.uint8).reshape(n, HEADER_SIZE)
    items = np.zeros((n, _HEAD_CHUNKS + 2), dtype="<u8")
    items[:, :_HEAD_CHUNKS] = head.view("<u8")
    items[:, _HEAD_CHUNKS] = headers["stream_id"].astype(np.uint64) ^ headers["sequence"]
    counts = np.ones((n, _HEAD_CHUNKS + 2), dtype=np.int64)
    counts[:, _HEAD_CHUNKS] = reps
    raw = np.repeat(items.ravel(), counts.ravel()).view(np.uint8)

    runs = np.empty((n, 6), dtype=np.int64)
    runs[:, 0] = LENGTH_PREFIX + HEADER_SIZE
    runs[:, 1] = 8 * _HEAD_CHUNKS - LENGTH_PREFIX - HEADER_SIZE
    runs[:, 2] = fill
    runs[:, 3] = 8 * reps - fill
    runs[:, 4] = has
    runs[:, 5] = 8 - has
    out = raw[np.repeat(np.tile(_KEEP_RUNS, n), runs.ravel())]

    starts = np.cumsum(sizes + LENGTH_PREFIX) - sizes
    if has.any():
        last = starts + sizes - 1
        x = _xor_frames(out, starts, last)
        out[last[has]] = x[has]
    return FrameBatch(out.tobytes(), starts, sizes)


def _encode_large(headers: np.ndarray, sizes: np.ndarray, fill: np.ndarray) -> FrameBatch:
    """Frame-by-frame assembly for batches of big notifications.

    The byte gather above costs an index per output byte; here each filler is
    one repeated ``bytes`` and the checksum comes from per-frame XORs: whole
    8-byte repeats cancel in pairs, leaving at most one full pattern plus a
    prefix of it.
    """
    n = len(sizes)
    hbytes = headers.view(np.uint8).reshape(n, HEADER_SIZE)
    pats = (headers["stream_id"].astype(np.uint64) ^ headers["sequence"]).astype("<u8")
    pxor = np.bitwise_xor.accumulate(pats.view(np.uint8).reshape(n, 8), axis=1)
    tail = fill & 7
    x = np.bitwise_xor.reduce(hbytes, axis=1)
    x ^= np.where((fill >> 3) & 1 == 1, pxor[:, 7], 0).astype(np.uint8)
    x ^= np.where(tail > 0, pxor[np.arange(n), np.maximum(tail - 1, 0)], 0).astype(np.uint8)

    prefixes = sizes.astype("<u4").tobytes()
    heads = hbytes.tobytes()
    pat = pats.tobytes()
    sums = x.tobytes()
    parts: List[bytes] = []
    add = parts.append
    for i, (size, f) in enumerate(zip(sizes.tolist(), fill.tolist())):
        add(prefixes[4 * i : 4 * i + 4])
        add(heads[HEADER_SIZE * i : HEADER_SIZE * (i + 1)])
        if size > HEADER_SIZE:
            add((pat[8 * i : 8 * i + 8] * ((f + 7) >> 3))[:f])
            add(sums[i : i + 1])
    starts = np.cumsum(sizes + LENGTH_PREFIX) - sizes
    return FrameBatch(b"".join(parts), starts, sizes)


class DecodedBatch(NamedTuple):
    headers: np.ndarray  # HEADER_DTYPE
    payload_sizes: np.ndarray  # int64
    corrupt: np.ndarray  # bool: short, unknown version, filler or checksum mismatch


def decode_batch(batch: FrameBatch, check_filler: bool = True) -> DecodedBatch:
    """Vectorised :func:`decode_notification`; bad frames are flagged, not raised.

    The whole-frame XOR check catches any single corrupted byte. With
    ``check_filler`` the batch is also re-encoded from its decoded headers and
    compared byte for byte, which pins every filler byte to its pattern.
    """
    n = len(batch)
    sizes = np.asarray(batch.sizes, dtype=np.int64)
    starts = np.asarray(batch.starts, dtype=np.int64)
    if n == 0:
        return DecodedBatch(np.zeros(0, HEADER_DTYPE), np.zeros(0, np.int64), np.zeros(0, bool))
    buf = np.frombuffer(batch.data, dtype=np.uint8)
    short = sizes < HEADER_SIZE
    hstarts = np.where(short, 0, starts)
    headers = buf[hstarts[:, None] + _H_COLS].view(HEADER_DTYPE).reshape(n)
    corrupt = short | (headers["version"] != VERSION)

    payload = sizes - HEADER_SIZE
    has = payload > 0
    if has.any():
        corrupt |= has & (_xor_frames(buf, starts, starts + sizes) != 0)
    if check_filler and not short.any():
        expect = encode_batch(headers, sizes)
        if expect.data != batch.data:
            if len(expect.data) == len(batch.data) and np.array_equal(expect.starts, starts):
                diff = np.flatnonzero(np.frombuffer(expect.data, np.uint8) != buf)
                corrupt[np.searchsorted(starts - LENGTH_PREFIX, diff, side="right") - 1] = True
            else:
                for i in range(n):
                    if not corrupt[i]:
                        try:
                            decode_notification(batch.frame(i))
                        except CodecError:
                            corrupt[i] = True
    return DecodedBatch(headers, np.maximum(payload, 0), corrupt)


def restamp_batch(batch: FrameBatch, send_ts_ns: int | np.ndarray) -> FrameBatch:
    """Rewrite ``send_ts_ns`` in every frame, keeping checksums valid."""
    n = len(batch)
    if n == 0:
        return batch
    buf = np.frombuffer(batch.data, dtype=np.uint8).copy()
    starts = np.asarray(batch.starts, dtype=np.int64)
    sizes = np.asarray(batch.sizes, dtype=np.int64)
    cols = starts[:, None] + _TS_COLS
    old = buf[cols]
    new = np.broadcast_to(np.asarray(send_ts_ns, dtype="<u8"), (n,)).astype("<u8").view(np.uint8).reshape(n, 8)
    buf[cols] = new
    has = sizes > HEADER_SIZE
    last = (starts + sizes - 1)[has]
    delta = np.bitwise_xor.reduce(old, axis=1) ^ np.bitwise_xor.reduce(new, axis=1)
    buf[last] ^= delta[has]
    return FrameBatch(buf.tobytes(), starts, sizes)


def make_headers(n: int) -> np.ndarray:
    h = np.zeros(n, dtype=HEADER_DTYPE)
    h["version"] = VERSION
    return h


def header_from_record(rec) -> NotificationHeader:
    """``HEADER_DTYPE`` scalar to :class:`NotificationHeader`."""
    return NotificationHeader(
        int(rec["stream_id"]),
        int(rec["sequence"]),
        int(rec["send_ts_ns"]),
        int(rec["event_type"]),
        int(rec["priority"]),
        int(rec["symbol_id"]),
        int(rec["attr_count"]),
        int(rec["version"]),
    )
