"""Binary latency logs, CSV conversion and percentile summaries.

File layout: an 8-byte header (``b"WRLL"``, ``uint16`` version, ``uint16``
zero) followed by fixed 32-byte little-endian records::

    sequence u64 | send_ts_ns u64 | recv_ts_ns u64 | stream_id u32 | payload_size u32
"""

from __future__ import annotations

import io
import math
import os
import queue
import struct
import threading
import warnings
from dataclasses import dataclass
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"WRLL"
VERSION = 1
HEADER = struct.Struct("<4sHH")
HEADER_SIZE = HEADER.size  # 8
RECORD_DTYPE = np.dtype(
    [
        ("sequence", "<u8"),
        ("send_ts_ns", "<u8"),
        ("recv_ts_ns", "<u8"),
        ("stream_id", "<u4"),
        ("payload_size", "<u4"),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize  # 32
BLOCK_RECORDS = 65536

CSV_HEADER = "stream_id,sequence,send_ts_ns,recv_ts_ns,latency_ns,payload_size"


class LogError(ValueError):
    pass


class TruncatedLogWarning(UserWarning):
    pass


class LatencyRecord(NamedTuple):
    sequence: int
    send_ts_ns: int
    recv_ts_ns: int
    stream_id: int
    payload_size: int

    @property
    def latency_ns(self) -> int:
        return self.recv_ts_ns - self.send_ts_ns


def make_records(n: int) -> np.ndarray:
    return np.zeros(n, dtype=RECORD_DTYPE)


# ---------------------------------------------------------------------------
# writing


class LogWriter:
    """Single-writer latency log.

    Records are staged in fixed blocks of ``block_records``; full blocks go to
    a writer thread through a bounded queue, so a slow disk blocks the caller
    instead of dropping records. The file holds only whole records at every
    flush boundary.
    """

    def __init__(self, path: str | os.PathLike, block_records: int = BLOCK_RECORDS, background: bool = True, queue_blocks: int = 4):
        self.path = os.fspath(path)
        self._fh = open(self.path, "wb")
        self._fh.write(HEADER.pack(MAGIC, VERSION, 0))
        self._block = np.empty(block_records, dtype=RECORD_DTYPE)
        self._fill = 0
        self.count = 0
        self._error: Optional[BaseException] = None
        self._closed = False
        self._queue: Optional[queue.Queue] = None
        self._thread: Optional[threading.Thread] = None
        if background:
            self._queue = queue.Queue(maxsize=queue_blocks)
            self._thread = threading.Thread(target=self._drain, name="wrench-log-writer", daemon=True)
            self._thread.start()

    def _drain(self) -> None:
        assert self._queue is not None
        while True:
            item = self._queue.get()
            try:
                if item is None:
                    return
                if self._error is None:
                    try:
                        self._fh.write(item)
                    except BaseException as exc:  # disk full etc.
                        self._error = exc
            finally:
                self._queue.task_done()

    def _raise_pending(self) -> None:
        if self._error is not None:
            raise LogError(f"writing {self.path} failed: {self._error}") from self._error

    def _emit(self, data: bytes) -> None:
        self._raise_pending()
        if self._queue is not None:
            self._queue.put(data)
        else:
            try:
                self._fh.write(data)
            except OSError as exc:
                self._error = exc
                self._raise_pending()

    def _handoff(self) -> None:
        if self._fill:
            self._emit(self._block[: self._fill].tobytes())
            self._fill = 0

    def append(self, record: LatencyRecord | Tuple[int, int, int, int, int]) -> None:
        if self._closed:
            raise LogError("log writer is closed")
        self._block[self._fill] = tuple(record)
        self._fill += 1
        self.count += 1
        if self._fill == len(self._block):
            self._handoff()

    def append_many(self, records: np.ndarray) -> None:
        if self._closed:
            raise LogError("log writer is closed")
        records = np.asarray(records, dtype=RECORD_DTYPE)
        block = self._block
        cap = len(block)
        i = 0
        n = len(records)
        while i < n:
            take = min(cap - self._fill, n - i)
            block[self._fill : self._fill + take] = records[i : i + take]
            self._fill += take
            i += take
            if self._fill == cap:
                self._handoff()
        self.count += n

    def flush(self) -> None:
        """Push staged records to the file and wait until they are written."""
        self._handoff()
        if self._queue is not None:
            self._queue.join()
        self._raise_pending()
        self._fh.flush()

    def close(self) -> None:
        if self._closed:
            return
        try:
            self._handoff()
        finally:
            self._closed = True
            if self._queue is not None:
                self._queue.put(None)
                assert self._thread is not None
                self._thread.join()
            self._fh.close()
        self._raise_pending()

    def __enter__(self) -> "LogWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def append(writer: LogWriter, record: LatencyRecord) -> None:
    writer.append(record)


def write_log(path: str | os.PathLike, records: np.ndarray) -> int:
    with LogWriter(path, background=False) as w:
        w.append_many(records)
    return len(records)


# ---------------------------------------------------------------------------
# reading


@dataclass
class LogInfo:
    records: int
    trailing_bytes: int
    version: int

    @property
    def truncated(self) -> bool:
        return self.trailing_bytes != 0


def _check_header(raw: bytes, path: str) -> int:
    if len(raw) < HEADER_SIZE:
        raise LogError(f"{path}: too short for a latency log header")
    magic, version, _ = HEADER.unpack(raw[:HEADER_SIZE])
    if magic != MAGIC:
        raise LogError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise LogError(f"{path}: unsupported log version {version}")
    return version


def log_info(path: str | os.PathLike) -> LogInfo:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        version = _check_header(fh.read(HEADER_SIZE), path)
    size = os.path.getsize(path) - HEADER_SIZE
    return LogInfo(size // RECORD_SIZE, size % RECORD_SIZE, version)


def iter_log(path: str | os.PathLike, chunk_records: int = 1 << 20) -> Iterator[np.ndarray]:
    """Yield complete records in chunks; warns if the file ends mid-record."""
    path = os.fspath(path)
    info = log_info(path)
    if info.truncated:
        warnings.warn(f"{path}: {info.trailing_bytes} trailing bytes after the last whole record", TruncatedLogWarning, stacklevel=2)
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        left = info.records
        while left:
            n = min(chunk_records, left)
            arr = np.fromfile(fh, dtype=RECORD_DTYPE, count=n)
            if len(arr) == 0:
                break
            left -= len(arr)
            yield arr


def read_log(path: str | os.PathLike) -> np.ndarray:
    chunks = list(iter_log(path))
    if not chunks:
        return make_records(0)
    return chunks[0] if len(chunks) == 1 else np.concatenate(chunks)


# ---------------------------------------------------------------------------
# CSV


def _csv_lines(arr: np.ndarray) -> str:
    sid = arr["stream_id"].tolist()
    seq = arr["sequence"].tolist()
    snd = arr["send_ts_ns"].tolist()
    rcv = arr["recv_ts_ns"].tolist()
    size = arr["payload_size"].tolist()
    return "".join(f"{a},{b},{c},{d},{d - c},{e}\n" for a, b, c, d, e in zip(sid, seq, snd, rcv, size))


def convert_to_csv(log_path: str | os.PathLike, out_path: str | os.PathLike) -> int:
    """Write one CSV row per record; returns the row count.

    A truncated trailing record is skipped with a :class:`TruncatedLogWarning`.
    """
    rows = 0
    with open(out_path, "w", encoding="ascii", newline="\n") as out:
        out.write(CSV_HEADER + "\n")
        for chunk in iter_log(log_path, chunk_records=1 << 18):
            out.write(_csv_lines(chunk))
            rows += len(chunk)
    return rows


def read_csv_records(csv_path: str | os.PathLike) -> np.ndarray:
    """Parse a converter CSV back into records (``latency_ns`` is ignored)."""
    with open(csv_path, encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise LogError(f"{csv_path}: unexpected CSV header {header!r}")
        body = fh.read()
    if not body.strip():
        return make_records(0)
    cols = np.loadtxt(
        io.StringIO(body),
        delimiter=",",
        dtype=np.uint64,
        usecols=(0, 1, 2, 3, 5),
        ndmin=2,
    )
    out = make_records(len(cols))
    out["stream_id"] = cols[:, 0]
    out["sequence"] = cols[:, 1]
    out["send_ts_ns"] = cols[:, 2]
    out["recv_ts_ns"] = cols[:, 3]
    out["payload_size"] = cols[:, 4]
    return out


def convert_from_csv(csv_path: str | os.PathLike, log_path: str | os.PathLike) -> int:
    return write_log(log_path, read_csv_records(csv_path))


def latencies(records: np.ndarray) -> np.ndarray:
    """Signed ``recv - send`` in ns."""
    return records["recv_ts_ns"].astype(np.int64) - records["send_ts_ns"].astype(np.int64)


# ---------------------------------------------------------------------------
# histogram

_LOW_NS = 1_000
_HIGH_NS = 100 * 1_000_000_000
_RATIO = 1.01
_LOG_RATIO = math.log(_RATIO)
_N_LOG = math.ceil(math.log(_HIGH_NS / _LOW_NS) / _LOG_RATIO)
# bins: [negative] [0..999 ns exact] [log buckets] [overflow]
_NEG = 0
_LIN0 = 1
_LOG0 = _LIN0 + _LOW_NS
_OVER = _LOG0 + _N_LOG
_NBINS = _OVER + 1


def _bin_index(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    idx = np.empty(len(v), dtype=np.int64)
    neg = v < 0
    lin = (v >= 0) & (v < _LOW_NS)
    big = v >= _LOW_NS
    idx[neg] = _NEG
    idx[lin] = _LIN0 + v[lin]
    if big.any():
        lg = np.floor(np.log(v[big] / _LOW_NS) / _LOG_RATIO).astype(np.int64)
        idx[big] = np.minimum(_LOG0 + lg, _OVER)
    return idx


def _representative(b: int) -> float:
    if b < _LOG0:
        return float(b - _LIN0)
    if b >= _OVER:
        return float(_HIGH_NS)
    return _LOW_NS * _RATIO ** (b - _LOG0 + 0.5)


class LatencyHistogram:
    """Mergeable latency histogram with <= 1 % relative quantile error.

    Values below 1 us are kept exactly, 1 us .. 100 s fall in geometric
    buckets 1 % wide, larger values in one overflow bucket. Quantiles are
    nearest-rank and clamped to the observed min/max.
    """

    def __init__(self):
        self.counts = np.zeros(_NBINS, dtype=np.int64)
        self.count = 0
        self.min: Optional[int] = None
        self.max: Optional[int] = None
        self.sum = 0

    @property
    def negative(self) -> int:
        return int(self.counts[_NEG])

    def record(self, values) -> None:
        v = np.atleast_1d(np.asarray(values, dtype=np.int64))
        if len(v) == 0:
            return
        self.counts += np.bincount(_bin_index(v), minlength=_NBINS)
        self.count += len(v)
        lo, hi = int(v.min()), int(v.max())
        self.min = lo if self.min is None else min(self.min, lo)
        self.max = hi if self.max is None else max(self.max, hi)
        self.sum += int(v.sum())

    def merge(self, other: "LatencyHistogram") -> "LatencyHistogram":
        out = LatencyHistogram()
        out.counts = self.counts + other.counts
        out.count = self.count + other.count
        mins = [m for m in (self.min, other.min) if m is not None]
        maxs = [m for m in (self.max, other.max) if m is not None]
        out.min = min(mins) if mins else None
        out.max = max(maxs) if maxs else None
        out.sum = self.sum + other.sum
        return out

    def __iadd__(self, other: "LatencyHistogram") -> "LatencyHistogram":
        merged = self.merge(other)
        self.__dict__.update(merged.__dict__)
        return self

    def quantile(self, q: float) -> Optional[float]:
        if self.count == 0:
            return None
        if not 0 <= q <= 1:
            raise ValueError("quantile must be in [0, 1]")
        rank = max(1, math.ceil(q * self.count))
        b = int(np.searchsorted(np.cumsum(self.counts), rank))
        if b == _NEG:
            return float(self.min)
        val = _representative(b)
        return float(min(max(val, self.min), self.max))

    def quantiles(self, qs: Sequence[float]) -> List[Optional[float]]:
        if self.count == 0:
            return [None] * len(qs)
        cum = np.cumsum(self.counts)
        out = []
        for q in qs:
            rank = max(1, math.ceil(q * self.count))
            b = int(np.searchsorted(cum, rank))
            val = float(self.min) if b == _NEG else _representative(b)
            out.append(float(min(max(val, self.min), self.max)))
        return out

    @property
    def mean(self) -> Optional[float]:
        return self.sum / self.count if self.count else None


def exact_quantile(values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile by sorting; the reference for :class:`LatencyHistogram`."""
    s = np.sort(np.asarray(values))
    rank = max(1, math.ceil(q * len(s)))
    return float(s[rank - 1])


# ---------------------------------------------------------------------------
# summaries

QUANTILES = (0.5, 0.9, 0.99, 0.999)
PAYLOAD_BANDS = (0, 128, 256, 512, 1024, 4096)
SUMMARY_COLUMNS = ("group", "count", "min", "p50", "p90", "p99", "p99.9", "max", "mean", "negative")


def band_label(i: int) -> str:
    lo = PAYLOAD_BANDS[i]
    if i + 1 < len(PAYLOAD_BANDS):
        return f"{lo}-{PAYLOAD_BANDS[i + 1] - 1}"
    return f"{lo}+"


@dataclass
class SummaryRow:
    group: str
    count: int
    min: Optional[float]
    p50: Optional[float]
    p90: Optional[float]
    p99: Optional[float]
    p999: Optional[float]
    max: Optional[float]
    mean: Optional[float]
    negative: int

    @classmethod
    def from_histogram(cls, group: str, h: LatencyHistogram) -> "SummaryRow":
        p50, p90, p99, p999 = h.quantiles(QUANTILES)
        return cls(group, h.count, None if h.min is None else float(h.min), p50, p90, p99, p999,
                   None if h.max is None else float(h.max), h.mean, h.negative)

    def values(self) -> tuple:
        return (self.group, self.count, self.min, self.p50, self.p90, self.p99, self.p999, self.max, self.mean, self.negative)


def summarize_records(records: np.ndarray, group_by: str = "none") -> Dict[str, LatencyHistogram]:
    lat = latencies(records)
    if group_by == "none":
        h = LatencyHistogram()
        h.record(lat)
        return {"all": h}
    if group_by == "stream":
        keys = records["stream_id"]
        labels = {int(k): str(int(k)) for k in np.unique(keys)}
    elif group_by == "payload_band":
        keys = np.searchsorted(PAYLOAD_BANDS, records["payload_size"], side="right") - 1
        labels = {int(k): band_label(int(k)) for k in np.unique(keys)}
    else:
        raise ValueError(f"unknown group_by {group_by!r}")
    out: Dict[str, LatencyHistogram] = {}
    for k, label in labels.items():
        h = LatencyHistogram()
        h.record(lat[keys == k])
        out[label] = h
    return out


def summarize(log_path: str | os.PathLike, group_by: str = "none") -> List[SummaryRow]:
    """Latency summary of a log, optionally per stream or payload band."""
    hists: Dict[str, LatencyHistogram] = {}
    for chunk in iter_log(log_path):
        for label, h in summarize_records(chunk, group_by).items():
            if label in hists:
                hists[label] += h
            else:
                hists[label] = h

    def order(label: str):
        head = label.split("-")[0].rstrip("+")
        return (0, int(head)) if head.isdigit() else (1, label)

    return [SummaryRow.from_histogram(k, hists[k]) for k in sorted(hists, key=order) if hists[k].count]


def _fmt(v, digits: int = 1) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v / 1000:.{digits}f}"
    return str(v)


def format_summary(rows: Sequence[SummaryRow]) -> str:
    """Human-readable table; latencies in microseconds."""
    head = ["group", "count", "min_us", "p50_us", "p90_us", "p99_us", "p99.9_us", "max_us", "mean_us", "negative"]
    body = [[r.group, str(r.count)] + [_fmt(v) for v in r.values()[2:9]] + [str(r.negative)] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def summary_to_csv(rows: Sequence[SummaryRow]) -> str:
    """CSV with latencies in ns."""
    out = [",".join(SUMMARY_COLUMNS)]
    for r in rows:
        out.append(",".join("" if v is None else (f"{v:.0f}" if isinstance(v, float) else str(v)) for v in r.values()))
    return "\n".join(out) + "\n"
