"""Publisher and subscriber loops, snapshot capture and replay.

The publisher side paces a synthetic workload (or replays a snapshot) over
any transport; the subscriber side timestamps each arrival, decodes it and
appends a latency record. Both ends move frames in batches: every wake of the
publisher sends all notifications that have fallen due, and the subscriber
stamps a whole batch with one receive time taken before decoding.
"""

from __future__ import annotations

import logging
import math
import os
import struct
import sys
import threading
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .codec import FrameBatch, decode_batch, encode_batch, make_headers, restamp_batch
from .latlog import RECORD_DTYPE, LogError, LogWriter
from .manifest import RunManifest, StreamPlan, manifest_path_for
from .pacing import NS, Pacer, RateMeter, wait_until
from .transport import (
    FaultyLoopbackTransport,
    StreamAborted,
    TransportConfig,
    TransportError,
    make_transport,
)
from .workload import WorkloadSpec, expected_total, sample_batch, split_profile, stream_rng

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"WRSN"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sH")
_SNAP_RECORD = struct.Struct("<QI")
SWITCH_INTERVAL_S = 0.0002


def default_workers() -> int:
    """One publisher per CPU, keeping one for the OS and transport."""
    try:
        n = len(os.sched_getaffinity(0))
    except AttributeError:
        n = os.cpu_count() or 1
    return max(1, n - 1)


@dataclass
class PublisherOptions:
    spin_threshold_us: float = 100.0
    burst_cap_ms: float = 1.0
    # shortest time between two wakes; sends are coalesced within it
    min_wake_us: float = 500.0
    stream_base: int = 0
    # replay only: rewrite send_ts_ns at send time
    restamp: bool = True
    time_scale: float = 1.0
    live: bool = False
    live_stream: Optional[TextIO] = None
    start_delay_ms: float = 20.0


@dataclass
class WorkerStats:
    stream_id: int
    intended: int
    sent: int = 0
    max_lag: int = 0
    error: Optional[str] = None
    meter: Optional[RateMeter] = None
    first_send_ns: Optional[int] = None
    last_send_ns: Optional[int] = None

    @property
    def slippage(self) -> float:
        return self.max_lag / self.intended if self.intended else 0.0


@dataclass
class PublisherStats:
    workers: List[WorkerStats]
    start_mono_ns: int
    scheduled_s: float
    elapsed_s: float = 0.0

    @property
    def sent(self) -> int:
        return sum(w.sent for w in self.workers)

    @property
    def intended(self) -> int:
        return sum(w.intended for w in self.workers)

    @property
    def completed(self) -> bool:
        return all(w.error is None and w.sent == w.intended for w in self.workers)

    @property
    def slippage(self) -> float:
        return max((w.slippage for w in self.workers), default=0.0)

    @property
    def max_lag(self) -> int:
        return max((w.max_lag for w in self.workers), default=0)

    def rates(self) -> np.ndarray:
        """Aggregate achieved rate per second of the schedule."""
        nwin = max(1, math.ceil(self.scheduled_s))
        total = np.zeros(nwin)
        for w in self.workers:
            if w.meter is not None:
                total += w.meter.rates(nwin)
        return total

    def write_rates(self, path: str | os.PathLike) -> None:
        nwin = max(1, math.ceil(self.scheduled_s))
        cols = [w.meter.rates(nwin) if w.meter is not None else np.zeros(nwin) for w in self.workers]
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("second,rate," + ",".join(f"stream_{w.stream_id}" for w in self.workers) + "\n")
            total = np.sum(cols, axis=0) if cols else np.zeros(nwin)
            for i in range(nwin):
                fh.write(f"{i},{total[i]:.0f}," + ",".join(f"{c[i]:.0f}" for c in cols) + "\n")


class _LiveCounter:
    """Aggregate counter, printed as ``t,count,rate`` once a second."""

    def __init__(self, start_ns: int, out: Optional[TextIO]):
        self.start_ns = start_ns
        self.out = out
        self.count = 0
        self._lock = threading.Lock()
        self._next = start_ns + NS
        self._last_count = 0

    def add(self, now_ns: int, n: int) -> None:
        with self._lock:
            self.count += n
            if self.out is not None and now_ns >= self._next:
                t = (now_ns - self.start_ns) / NS
                rate = self.count - self._last_count
                self._last_count = self.count
                self._next += NS * max(1, (now_ns - self._next) // NS + 1)
                print(f"{t:.0f},{self.count},{rate}", file=self.out, flush=True)


# ---------------------------------------------------------------------------
# synthetic publishing


def _publish_worker(
    spec: WorkloadSpec,
    stream_id: int,
    priority: int,
    conn,
    opts: PublisherOptions,
    start_ns: int,
    stats: WorkerStats,
    live: Optional[_LiveCounter],
    workers: int,
) -> None:
    profile = split_profile(spec.profile, workers)
    pacer = Pacer(profile, start_ns)
    rng = stream_rng(spec.seed, stream_id)
    spin = int(opts.spin_threshold_us * 1000)
    min_wake = int(opts.min_wake_us * 1000)
    slack = min_wake + spin
    meter = stats.meter = RateMeter(start_ns)
    seq = 0
    last_wake = start_ns - min_wake
    max_lag = 0
    try:
        while True:
            d = pacer.peek()
            if d is None:
                break
            target = last_wake + min_wake
            # spin only for a real deadline; a coalescing wake needs no precision
            now = wait_until(d, spin) if d >= target else wait_until(target, 0)
            last_wake = now
            rate = pacer.state.target_rate
            cap = max(1, math.ceil(opts.burst_cap_ms * rate / 1000.0)) if opts.burst_cap_ms > 0 else None
            # overdue beyond one coalescing window; a message due right now is not lag
            lag = pacer.intended_by(now - slack) - pacer.sent
            if lag > max_lag:
                max_lag = lag
            k = pacer.take_due(now, cap)
            if k == 0:
                continue
            p = sample_batch(spec, rng, k)
            hdr = make_headers(k)
            hdr["priority"] = priority
            hdr["event_type"] = p.event_type
            hdr["stream_id"] = stream_id
            hdr["sequence"] = np.arange(seq, seq + k, dtype=np.uint64)
            hdr["symbol_id"] = p.symbol_id
            hdr["attr_count"] = p.attr_count
            hdr["send_ts_ns"] = time.time_ns()
            conn.publish_batch(encode_batch(hdr, p.payload_size))
            seq += k
            stats.sent = seq
            meter.add(now, k)
            if stats.first_send_ns is None:
                stats.first_send_ns = now
            stats.last_send_ns = now
            if live is not None:
                live.add(now, k)
        conn.close()
    except TransportError as exc:
        stats.error = str(exc)
        log.error("stream %d: transport failed after %d notifications: %s", stream_id, seq, exc)
    finally:
        stats.max_lag = max_lag


def plan_streams(spec: WorkloadSpec, workers: int, stream_base: int = 0) -> List[Tuple[int, int, int]]:
    """``(stream_id, priority, intended)`` for every publisher worker."""
    per = expected_total(split_profile(spec.profile, workers))
    return [(stream_base + w, spec.priorities[w % len(spec.priorities)], per) for w in range(workers)]


def run_publisher(
    source: Union[WorkloadSpec, str, os.PathLike],
    transport,
    workers: Optional[int] = None,
    options: Optional[PublisherOptions] = None,
    manifest_path: Optional[str | os.PathLike] = None,
    rates_path: Optional[str | os.PathLike] = None,
    source_name: str = "",
) -> Tuple[RunManifest, PublisherStats]:
    """Publish a workload (or replay a snapshot file) and record the ground truth.

    Each worker owns one stream and one connection. Returns the manifest and
    per-worker statistics; the manifest and per-second rate CSV are written
    when paths are given.
    """
    opts = options or PublisherOptions()
    if not isinstance(source, WorkloadSpec):
        return _run_replay(os.fspath(source), transport, opts, manifest_path, rates_path)
    spec = source
    workers = workers or default_workers()
    plan = plan_streams(spec, workers, opts.stream_base)
    start_wall = time.time_ns()
    start_ns = time.monotonic_ns() + int(opts.start_delay_ms * 1e6)
    stats = PublisherStats([WorkerStats(sid, n) for sid, _, n in plan], start_ns, float(spec.profile.total_duration))
    live = _LiveCounter(start_ns, opts.live_stream or sys.stderr) if opts.live else None
    conns = [transport.connect(stream_id=sid) for sid, _, _ in plan]

    threads = []
    for (sid, prio, _), conn, ws in zip(plan, conns, stats.workers):
        args = (spec, sid, prio, conn, opts, start_ns, ws, live, workers)
        if workers == 1:
            _publish_worker(*args)
        else:
            t = threading.Thread(target=_publish_worker, args=args, name=f"wrench-pub-{sid}", daemon=True)
            t.start()
            threads.append(t)
    for t in threads:
        t.join()
    stats.elapsed_s = (time.monotonic_ns() - start_ns) / NS

    manifest = RunManifest(
        source=source_name,
        source_kind="workload",
        transport=getattr(transport, "kind", type(transport).__name__),
        endpoint=getattr(transport, "endpoint", "") or "",
        workers=workers,
        seed=spec.seed,
        scale=spec.profile.scale,
        start_wall_ns=start_wall,
        end_wall_ns=time.time_ns(),
        completed=stats.completed,
        scheduled_s=stats.scheduled_s,
        elapsed_s=stats.elapsed_s,
        slippage=stats.slippage,
        max_lag=stats.max_lag,
        streams={sid: StreamPlan(n, ws.sent, prio) for (sid, prio, n), ws in zip(plan, stats.workers)},
    )
    if manifest_path is not None:
        manifest.write(manifest_path)
    if rates_path is not None:
        stats.write_rates(rates_path)
    return manifest, stats


# ---------------------------------------------------------------------------
# snapshots


@dataclass
class SnapshotInfo:
    path: str
    frames: int
    duration_ns: int  # sum of deltas
    streams: dict = field(default_factory=dict)  # stream_id -> frame count


def _write_snapshot_header(fh) -> None:
    fh.write(_SNAP_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION))


def write_snapshot(path: str | os.PathLike, frames: Sequence[bytes], deltas_ns: Sequence[int]) -> SnapshotInfo:
    if len(frames) != len(deltas_ns):
        raise ValueError("frames and deltas differ in length")
    with open(path, "wb") as fh:
        _write_snapshot_header(fh)
        for d, f in zip(deltas_ns, frames):
            if d < 0:
                raise ValueError("snapshot deltas must be >= 0")
            fh.write(_SNAP_RECORD.pack(int(d), len(f)))
            fh.write(f)
    return SnapshotInfo(os.fspath(path), len(frames), int(sum(deltas_ns)))


class SnapshotError(ValueError):
    pass


def iter_snapshot(path: str | os.PathLike, chunk_frames: int = 4096) -> Iterator[Tuple[np.ndarray, List[bytes]]]:
    """Yield ``(deltas_ns, frames)`` chunks from a snapshot file."""
    with open(path, "rb") as fh:
        head = fh.read(_SNAP_HEADER.size)
        if len(head) < _SNAP_HEADER.size:
            raise SnapshotError(f"{path}: too short for a snapshot header")
        magic, version = _SNAP_HEADER.unpack(head)
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotError(f"{path}: bad magic {magic!r}, expected {SNAPSHOT_MAGIC!r}")
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"{path}: unsupported snapshot version {version}")
        data = fh.read()
    pos = 0
    end = len(data)
    unpack = _SNAP_RECORD.unpack_from
    rec = _SNAP_RECORD.size
    deltas: List[int] = []
    frames: List[bytes] = []
    while pos < end:
        if pos + rec > end:
            raise SnapshotError(f"{path}: truncated record header at byte {pos + _SNAP_HEADER.size}")
        d, n = unpack(data, pos)
        pos += rec
        if pos + n > end:
            raise SnapshotError(f"{path}: truncated frame at byte {pos + _SNAP_HEADER.size}")
        deltas.append(d)
        frames.append(data[pos : pos + n])
        pos += n
        if len(frames) == chunk_frames:
            yield np.array(deltas, dtype=np.int64), frames
            deltas, frames = [], []
    if frames:
        yield np.array(deltas, dtype=np.int64), frames


def read_snapshot(path: str | os.PathLike) -> Tuple[np.ndarray, List[bytes]]:
    deltas: List[np.ndarray] = []
    frames: List[bytes] = []
    for d, f in iter_snapshot(path):
        deltas.append(d)
        frames.extend(f)
    return (np.concatenate(deltas) if deltas else np.zeros(0, np.int64)), frames


def snapshot_info(path: str | os.PathLike) -> SnapshotInfo:
    total = 0
    count = 0
    streams: dict = {}
    for d, frames in iter_snapshot(path):
        total += int(d.sum())
        count += len(frames)
        for f in frames:
            sid = int.from_bytes(f[3:7], "little") if len(f) >= 7 else -1
            streams[sid] = streams.get(sid, 0) + 1
    return SnapshotInfo(os.fspath(path), count, total, streams)


def record_snapshot(
    subscription: Iterable[FrameBatch],
    out_path: str | os.PathLike,
    duration_s: Optional[float] = None,
    clock: Callable[[], int] = time.monotonic_ns,
) -> SnapshotInfo:
    """Capture frames with their inter-arrival gaps.

    Frames that arrive in one batch share an arrival time, so all but the
    first get a zero delta. Stops at the end of the subscription or after
    ``duration_s`` seconds from the first frame.
    """
    count = 0
    total = 0
    prev: Optional[int] = None
    limit = None if duration_s is None else int(duration_s * NS)
    first: Optional[int] = None
    streams: dict = {}
    pack = _SNAP_RECORD.pack
    with open(out_path, "wb") as fh:
        _write_snapshot_header(fh)
        for batch in subscription:
            now = clock()
            if first is None:
                first = now
            elif limit is not None and now - first > limit:
                break
            delta = 0 if prev is None else now - prev
            prev = now
            parts = []
            for f in batch.frames():
                parts.append(pack(delta, len(f)))
                parts.append(f)
                delta = 0
            fh.write(b"".join(parts))
            count += len(batch)
            sids = np.frombuffer(batch.data, np.uint8)[np.asarray(batch.starts)[:, None] + np.arange(3, 7)].copy().view("<u4").ravel()
            for sid, n in zip(*np.unique(sids, return_counts=True)):
                streams[int(sid)] = streams.get(int(sid), 0) + int(n)
    if count == 0:
        warnings.warn(f"{out_path}: no frames captured; wrote an empty snapshot", RuntimeWarning, stacklevel=2)
    total = 0 if first is None or prev is None else prev - first
    return SnapshotInfo(os.fspath(out_path), count, total, streams)


def _run_replay(
    path: str,
    transport,
    opts: PublisherOptions,
    manifest_path,
    rates_path,
) -> Tuple[RunManifest, PublisherStats]:
    if not opts.time_scale > 0:
        raise ValueError("time_scale must be > 0")
    info = snapshot_info(path)
    scheduled_s = info.duration_ns / opts.time_scale / NS
    start_wall = time.time_ns()
    start_ns = time.monotonic_ns() + int(opts.start_delay_ms * 1e6)
    ws = WorkerStats(opts.stream_base, info.frames)
    stats = PublisherStats([ws], start_ns, max(scheduled_s, 1e-9))
    spin = int(opts.spin_threshold_us * 1000)
    min_wake = int(opts.min_wake_us * 1000)
    meter = ws.meter = RateMeter(start_ns)
    live = _LiveCounter(start_ns, opts.live_stream or sys.stderr) if opts.live else None
    conn = transport.connect(stream_id=opts.stream_base)
    offset = 0.0
    sent = 0
    last_wake = start_ns - min_wake
    max_lag = 0
    try:
        for deltas, frames in iter_snapshot(path):
            due = start_ns + np.rint((offset + np.cumsum(deltas, dtype=np.float64)) / opts.time_scale).astype(np.int64)
            offset += float(deltas.sum())
            i = 0
            n = len(frames)
            while i < n:
                d = int(due[i])
                target = last_wake + min_wake
                now = wait_until(d, spin) if d >= target else wait_until(target, 0)
                last_wake = now
                j = int(np.searchsorted(due, now, side="right"))
                j = max(j, i + 1)
                max_lag = max(max_lag, j - i)
                batch = FrameBatch.from_frames(frames[i:j])
                if opts.restamp:
                    batch = restamp_batch(batch, time.time_ns())
                conn.publish_batch(batch)
                meter.add(now, j - i)
                if ws.first_send_ns is None:
                    ws.first_send_ns = now
                ws.last_send_ns = now
                if live is not None:
                    live.add(now, j - i)
                sent += j - i
                ws.sent = sent
                i = j
        conn.close()
    except TransportError as exc:
        ws.error = str(exc)
        log.error("replay: transport failed after %d frames: %s", sent, exc)
    ws.max_lag = max_lag
    stats.elapsed_s = (time.monotonic_ns() - start_ns) / NS
    manifest = RunManifest(
        source=path,
        source_kind="snapshot",
        transport=getattr(transport, "kind", type(transport).__name__),
        endpoint=getattr(transport, "endpoint", "") or "",
        workers=1,
        scale=opts.time_scale,
        start_wall_ns=start_wall,
        end_wall_ns=time.time_ns(),
        completed=ws.error is None and sent == info.frames,
        scheduled_s=scheduled_s,
        elapsed_s=stats.elapsed_s,
        slippage=0.0,
        max_lag=0,
        streams={sid: StreamPlan(n, n if ws.error is None else 0, 0) for sid, n in info.streams.items()},
    )
    if manifest_path is not None:
        manifest.write(manifest_path)
    if rates_path is not None:
        stats.write_rates(rates_path)
    return manifest, stats


def replay_duration_s(stats: PublisherStats) -> float:
    """Seconds from the replay schedule start to the last send."""
    w = stats.workers[0]
    if w.last_send_ns is None:
        return 0.0
    return (w.last_send_ns - stats.start_mono_ns) / NS


# ---------------------------------------------------------------------------
# subscribing


@dataclass
class SubscriberStats:
    received: int = 0
    logged: int = 0
    corrupt: int = 0
    batches: int = 0
    aborted: bool = False
    error: Optional[str] = None
    first_recv_ns: Optional[int] = None
    last_recv_ns: Optional[int] = None


def records_from_batch(batch: FrameBatch, recv_ts_ns: int, check_filler: bool = False) -> Tuple[np.ndarray, int]:
    """Latency records for every intact frame of ``batch``; also returns the corrupt count."""
    dec = decode_batch(batch, check_filler=check_filler)
    h = dec.headers
    sizes = dec.payload_sizes
    bad = int(dec.corrupt.sum())
    if bad:
        ok = ~dec.corrupt
        h = h[ok]
        sizes = sizes[ok]
    recs = np.empty(len(h), dtype=RECORD_DTYPE)
    recs["sequence"] = h["sequence"]
    recs["send_ts_ns"] = h["send_ts_ns"]
    recs["recv_ts_ns"] = recv_ts_ns
    recs["stream_id"] = h["stream_id"]
    recs["payload_size"] = sizes
    return recs, bad


def run_subscriber(
    transport,
    log_path: str | os.PathLike,
    expected_manifest: Optional[RunManifest] = None,
    check_filler: bool = False,
    live: bool = False,
    live_stream: Optional[TextIO] = None,
) -> SubscriberStats:
    """Receive until the transport's end of run, logging one record per frame.

    The receive time is read before a batch is decoded. Corrupt frames are
    counted and skipped; a connection lost mid-stream or a failed log write
    marks the stats instead of raising.
    """
    stats = SubscriberStats()
    counter = _LiveCounter(time.monotonic_ns(), live_stream or sys.stderr) if live else None
    writer = LogWriter(log_path)
    try:
        for batch in transport.subscribe():
            recv = time.time_ns()
            recs, bad = records_from_batch(batch, recv, check_filler)
            if bad:
                stats.corrupt += bad
                log.warning("%d corrupt frame(s) in batch %d", bad, stats.batches)
            writer.append_many(recs)
            n = len(batch)
            stats.received += n
            stats.logged += len(recs)
            stats.batches += 1
            if stats.first_recv_ns is None:
                stats.first_recv_ns = recv
            stats.last_recv_ns = recv
            if counter is not None:
                counter.add(time.monotonic_ns(), n)
    except StreamAborted as exc:
        stats.aborted = True
        stats.error = str(exc)
        log.error("%s", exc)
    except LogError as exc:
        stats.aborted = True
        stats.error = str(exc)
        log.error("log write failed, partial log: %s", exc)
    finally:
        try:
            writer.close()
        except LogError as exc:
            stats.aborted = True
            stats.error = str(exc)
    if expected_manifest is not None and stats.logged < expected_manifest.intended_total:
        log.info("received %d of %d intended notifications", stats.logged, expected_manifest.intended_total)
    return stats


# ---------------------------------------------------------------------------
# in-process runs


@dataclass
class LoopbackRun:
    manifest: RunManifest
    publisher: PublisherStats
    subscriber: SubscriberStats
    log_path: str
    manifest_path: str
    rates_path: str
    ledger: Optional[dict] = None


def run_loopback(
    source: Union[WorkloadSpec, str, os.PathLike],
    log_path: str | os.PathLike,
    config: Optional[TransportConfig] = None,
    workers: Optional[int] = None,
    options: Optional[PublisherOptions] = None,
    check_filler: bool = False,
    source_name: str = "",
) -> LoopbackRun:
    """Publisher and subscriber in one process over a loopback transport.

    Writes the log, a manifest next to it (with the fault injector's ledger
    for ``loopback-faulty``) and a per-second rate CSV.
    """
    config = config or TransportConfig()
    if config.kind == "tcp":
        raise ValueError("run_loopback needs a loopback transport")
    transport = make_transport(config)
    log_path = os.fspath(log_path)
    mpath = manifest_path_for(log_path)
    rpath = os.path.splitext(log_path)[0] + ".rates.csv"
    box: dict = {}
    old_switch = sys.getswitchinterval()
    # the subscriber thread would otherwise hold the GIL for up to 5 ms
    # while the publisher's sleep has already expired
    sys.setswitchinterval(min(old_switch, SWITCH_INTERVAL_S))

    def _sub():
        box["stats"] = run_subscriber(transport, log_path, check_filler=check_filler)

    t = threading.Thread(target=_sub, name="wrench-sub", daemon=True)
    t.start()
    try:
        manifest, pstats = run_publisher(source, transport, workers, options, None, rpath, source_name)
    finally:
        transport.close()
        t.join()
        sys.setswitchinterval(old_switch)
    ledger = None
    if isinstance(transport, FaultyLoopbackTransport):
        ledger = transport.ledger.as_dict()
        manifest.fault = dict(ledger)
    manifest.write(mpath)
    return LoopbackRun(manifest, pstats, box["stats"], log_path, mpath, rpath, ledger)
