"""Delivery verdicts from a latency log and run manifest.

Each stream's sequence numbers are classified as they arrive:

* in order: the next sequence after the highest seen;
* jump: beyond that, which opens a gap for the skipped range;
* out of order: a first delivery below the highest seen (it closes a gap);
* duplicate: a sequence already delivered.

Only open gaps are stored, so memory grows with the number of gaps rather
than the number of messages.
"""

from __future__ import annotations

import bisect
import enum
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

import numpy as np

from .latlog import LatencyHistogram, iter_log, latencies
from .manifest import RunManifest

DEFAULT_SLO_NS = 20_000_000
DEFAULT_SLO_PERCENTILE = 0.99


class VerifyError(ValueError):
    pass


class Delivery(enum.Enum):
    IN_ORDER = "in_order"
    JUMP = "jump"
    OUT_OF_ORDER = "out_of_order"
    DUPLICATE = "duplicate"


class StreamState:
    """Streaming gap/duplicate/order bookkeeping for one stream."""

    __slots__ = ("stream_id", "max_seen", "_lo", "_hi", "missing", "duplicates", "out_of_order", "deliveries", "histogram")

    def __init__(self, stream_id: int = 0):
        self.stream_id = stream_id
        self.max_seen = -1
        self._lo: List[int] = []  # open gaps as parallel sorted lists of bounds
        self._hi: List[int] = []
        self.missing = 0
        self.duplicates = 0
        self.out_of_order = 0
        self.deliveries = 0
        self.histogram = LatencyHistogram()

    @property
    def gaps(self) -> int:
        """Sequences below ``max_seen`` not yet delivered."""
        return self.missing

    @property
    def received_unique(self) -> int:
        return self.max_seen + 1 - self.missing

    @property
    def open_gap_ranges(self) -> int:
        return len(self._lo)

    def gap_ranges(self) -> List[tuple]:
        return list(zip(self._lo, self._hi))

    def observe(self, seq: int) -> Delivery:
        self.deliveries += 1
        top = self.max_seen
        if seq == top + 1:
            self.max_seen = seq
            return Delivery.IN_ORDER
        if seq > top:
            self._lo.append(top + 1)
            self._hi.append(seq - 1)
            self.missing += seq - 1 - top
            self.max_seen = seq
            return Delivery.JUMP
        i = bisect.bisect_right(self._lo, seq) - 1
        if i >= 0 and self._hi[i] >= seq:
            lo, hi = self._lo[i], self._hi[i]
            if lo == hi:
                del self._lo[i]
                del self._hi[i]
            elif seq == lo:
                self._lo[i] = lo + 1
            elif seq == hi:
                self._hi[i] = hi - 1
            else:
                self._hi[i] = seq - 1
                self._lo.insert(i + 1, seq + 1)
                self._hi.insert(i + 1, hi)
            self.missing -= 1
            self.out_of_order += 1
            return Delivery.OUT_OF_ORDER
        self.duplicates += 1
        return Delivery.DUPLICATE

    def observe_many(self, seqs: np.ndarray) -> None:
        n = len(seqs)
        if n == 0:
            return
        s = np.asarray(seqs, dtype=np.int64)
        if s[0] == self.max_seen + 1 and s[-1] - s[0] == n - 1 and (n == 1 or bool(np.all(np.diff(s) == 1))):
            self.max_seen = int(s[-1])
            self.deliveries += n
            return
        observe = self.observe
        for q in s.tolist():
            observe(q)


def observe(state: StreamState, record) -> StreamState:
    """Feed one :class:`~wrench.latlog.LatencyRecord` into ``state``."""
    if record.stream_id != state.stream_id:
        raise VerifyError(f"record for stream {record.stream_id} fed to state of stream {state.stream_id}")
    state.observe(record.sequence)
    state.histogram.record([record.recv_ts_ns - record.send_ts_ns])
    return state


class Verifier:
    """Accumulates :class:`StreamState` per stream from record arrays."""

    def __init__(self):
        self.states: Dict[int, StreamState] = {}

    def state(self, stream_id: int) -> StreamState:
        st = self.states.get(stream_id)
        if st is None:
            st = self.states[stream_id] = StreamState(stream_id)
        return st

    def observe_records(self, records: np.ndarray) -> None:
        if len(records) == 0:
            return
        sids = records["stream_id"]
        lat = latencies(records)
        first = int(sids[0])
        if bool(np.all(sids == first)):
            st = self.state(first)
            st.observe_many(records["sequence"])
            st.histogram.record(lat)
            return
        for sid in np.unique(sids).tolist():
            mask = sids == sid
            st = self.state(int(sid))
            st.observe_many(records["sequence"][mask])
            st.histogram.record(lat[mask])

    def observe_log(self, log_path: str | os.PathLike) -> None:
        for chunk in iter_log(log_path):
            self.observe_records(chunk)


@dataclass
class StreamReport:
    stream_id: Optional[int]
    priority: Optional[int]
    intended: Optional[int]
    received: int
    received_unique: int
    gaps: int
    duplicates: int
    out_of_order: int
    loss_rate: Optional[float]
    p50: Optional[float]
    p99: Optional[float]
    p999: Optional[float]
    max: Optional[float]
    negative: int = 0
    histogram: LatencyHistogram = field(default_factory=LatencyHistogram, repr=False)

    @property
    def exactly_once(self) -> bool:
        return self.gaps == 0 and self.duplicates == 0

    @property
    def ordered(self) -> bool:
        return self.out_of_order == 0

    @property
    def complete(self) -> Optional[bool]:
        if self.intended is None:
            return None
        return self.received_unique == self.intended


@dataclass
class QoSReport:
    streams: List[StreamReport]
    aggregate: StreamReport
    per_priority: Dict[int, StreamReport]
    slo_ns: int
    slo_percentile: float
    verdicts: Dict[str, Optional[bool]]
    fault_ledger: Dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        """All mandatory verdicts hold; an unknown completeness does not fail."""
        return all(v is not False for v in self.verdicts.values())

    def ledger_matches(self) -> Optional[bool]:
        """Whether gap/duplicate/out-of-order counts equal the fault injector's ledger."""
        f = self.fault_ledger
        if not f:
            return None
        a = self.aggregate
        return a.gaps == f.get("dropped", 0) and a.duplicates == f.get("duplicated", 0) and a.out_of_order == f.get("displaced", 0)

    def to_table(self) -> str:
        cols = ["stream", "prio", "intended", "received", "unique", "gaps", "dups", "ooo", "loss", "p50_us", "p99_us", "p99.9_us", "max_us", "neg"]
        rows = [_row_cells(s) for s in self.streams] + [_row_cells(self.aggregate, "all")]
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        out = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        out += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        if len(self.per_priority) > 1:
            out.append("")
            out.append("latency by priority:")
            for prio, rep in sorted(self.per_priority.items()):
                out.append(f"  priority {prio}: n={rep.received} p50={_us(rep.p50)} p99={_us(rep.p99)} max={_us(rep.max)} us")
        out.append("")
        pct = _pct_label(self.slo_percentile)
        out.append(f"latency SLO: {pct} < {self.slo_ns / 1e6:g} ms (percentile is configurable)")
        for name, v in self.verdicts.items():
            out.append(f"{name:12s} {'unknown' if v is None else ('PASS' if v else 'FAIL')}")
        if self.fault_ledger:
            f = self.fault_ledger
            out.append(
                f"fault ledger: dropped={f.get('dropped', 0)} duplicated={f.get('duplicated', 0)} "
                f"displaced={f.get('displaced', 0)} -> {'matches' if self.ledger_matches() else 'MISMATCH'}"
            )
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        cols = ["stream_id", "priority", "intended", "received", "received_unique", "gaps", "duplicates", "out_of_order", "loss_rate",
                "p50_ns", "p99_ns", "p999_ns", "max_ns", "negative", "exactly_once", "ordered", "complete"]
        lines = [",".join(cols)]
        for s in self.streams + [self.aggregate]:
            vals = [
                "all" if s.stream_id is None else s.stream_id, s.priority, s.intended, s.received, s.received_unique, s.gaps,
                s.duplicates, s.out_of_order, s.loss_rate, s.p50, s.p99, s.p999, s.max, s.negative,
                s.exactly_once, s.ordered, s.complete,
            ]
            lines.append(",".join(_csv_cell(v) for v in vals))
        lines.append("")
        lines.append("verdict,value")
        for name, v in self.verdicts.items():
            lines.append(f"{name},{_csv_cell(v)}")
        lines.append(f"slo_ns,{self.slo_ns}")
        lines.append(f"slo_percentile,{self.slo_percentile}")
        return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6g}" if v < 1 else f"{v:.0f}"
    return str(v)


def _us(v: Optional[float]) -> str:
    return "-" if v is None else f"{v / 1000:.1f}"


def _pct_label(q: float) -> str:
    return f"p{q * 100:g}"


def _row_cells(s: StreamReport, name: Optional[str] = None) -> List[str]:
    return [
        name or str(s.stream_id),
        "-" if s.priority is None else str(s.priority),
        "?" if s.intended is None else str(s.intended),
        str(s.received),
        str(s.received_unique),
        str(s.gaps),
        str(s.duplicates),
        str(s.out_of_order),
        "-" if s.loss_rate is None else f"{s.loss_rate:.4%}",
        _us(s.p50),
        _us(s.p99),
        _us(s.p999),
        _us(s.max),
        str(s.negative),
    ]


def _report(stream_id, priority, intended, deliveries, unique, gaps, dups, ooo, hist: LatencyHistogram) -> StreamReport:
    p50, p99, p999 = hist.quantiles((0.5, 0.99, 0.999))
    loss = None
    if intended is not None:
        loss = gaps / intended if intended else 0.0
    return StreamReport(stream_id, priority, intended, deliveries, unique, gaps, dups, ooo, loss, p50, p99, p999,
                        None if hist.max is None else float(hist.max), hist.negative, hist)


def finalize(
    states: Dict[int, StreamState] | Iterable[StreamState],
    manifest: Optional[RunManifest] = None,
    slo_ns: int = DEFAULT_SLO_NS,
    slo_percentile: float = DEFAULT_SLO_PERCENTILE,
) -> QoSReport:
    """Aggregate stream states into verdicts.

    With a manifest, gaps count every intended sequence never delivered
    (including a lost tail) and completeness is decided; without one,
    gaps are the holes below each stream's highest sequence and
    completeness is unknown.
    """
    if not isinstance(states, dict):
        states = {s.stream_id: s for s in states}
    if manifest is not None:
        extra = sorted(set(states) - set(manifest.streams))
        if extra:
            raise VerifyError(f"log has streams {extra} that the manifest does not list")
        ids = sorted(set(states) | set(manifest.streams))
    else:
        ids = sorted(states)

    streams: List[StreamReport] = []
    agg_hist = LatencyHistogram()
    by_prio: Dict[int, LatencyHistogram] = {}
    tot = dict(intended=0, received=0, unique=0, gaps=0, dups=0, ooo=0)
    for sid in ids:
        st = states.get(sid) or StreamState(sid)
        plan = manifest.streams.get(sid) if manifest is not None else None
        intended = plan.intended if plan is not None else None
        priority = plan.priority if plan is not None else None
        unique = st.received_unique
        gaps = st.gaps if intended is None else max(intended - unique, st.gaps)
        rep = _report(sid, priority, intended, st.deliveries, unique, gaps, st.duplicates, st.out_of_order, st.histogram)
        streams.append(rep)
        agg_hist += st.histogram
        key = -1 if priority is None else priority
        by_prio[key] = by_prio[key].merge(st.histogram) if key in by_prio else st.histogram.merge(LatencyHistogram())
        tot["intended"] += intended or 0
        tot["received"] += st.deliveries
        tot["unique"] += unique
        tot["gaps"] += gaps
        tot["dups"] += st.duplicates
        tot["ooo"] += st.out_of_order

    agg_intended = tot["intended"] if manifest is not None else None
    aggregate = _report(None, None, agg_intended, tot["received"], tot["unique"], tot["gaps"], tot["dups"], tot["ooo"], agg_hist)
    per_priority = {
        p: _report(None, p, None, h.count, h.count, 0, 0, 0, h) for p, h in by_prio.items()
    }

    if manifest is None:
        complete: Optional[bool] = None
    else:
        complete = all(s.complete for s in streams)
    if agg_hist.count:
        observed = agg_hist.quantile(slo_percentile)
        latency_ok = observed is not None and observed < slo_ns
    else:
        latency_ok = True
    verdicts = {
        "exactly_once": aggregate.gaps == 0 and aggregate.duplicates == 0,
        "ordered": aggregate.out_of_order == 0,
        "complete": complete,
        "latency_slo": latency_ok,
    }
    fault = dict(manifest.fault) if manifest is not None else {}
    return QoSReport(streams, aggregate, per_priority, slo_ns, slo_percentile, verdicts, fault)


def verify_log(
    log_path: str | os.PathLike,
    manifest: Optional[RunManifest] = None,
    slo_ns: int = DEFAULT_SLO_NS,
    slo_percentile: float = DEFAULT_SLO_PERCENTILE,
) -> QoSReport:
    v = Verifier()
    v.observe_log(log_path)
    return finalize(v.states, manifest, slo_ns, slo_percentile)


def verify_records(records: np.ndarray, manifest: Optional[RunManifest] = None, **kw) -> QoSReport:
    v = Verifier()
    v.observe_records(records)
    return finalize(v.states, manifest, **kw)
