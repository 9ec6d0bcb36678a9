"""Absolute-schedule pacing.

Every notification has a deadline fixed by its index inside a rate segment::

    deadline(k) = segment_start + round(k * 1e9 / rate)

so a stalled publisher catches up afterwards instead of silently lowering
the offered load. ``send_ts_ns`` in each notification records when it really
left; the schedule only records intent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np

from .workload import RateProfile, _exact

NS = 1_000_000_000
DEFAULT_SPIN_THRESHOLD_NS = 100_000
DEFAULT_BURST_CAP_MS = 1.0


@dataclass
class PaceState:
    segment_index: int
    segment_start_ns: int
    sent_in_segment: int
    target_rate: float
    # rounding remainder of the last issued deadline, in ns
    carry_ns: float = 0.0


class Pacer:
    """Turns a :class:`RateProfile` into a stream of send deadlines."""

    def __init__(self, profile: RateProfile, start_ns: int):
        self.durations_ns = [s.duration_s * NS for s in profile.segments]
        self.rates = [s.rate * profile.scale for s in profile.segments]
        # exact rates as (numerator, denominator) so deadlines are exact
        self._frac = [(f.numerator, f.denominator) for f in (_exact(s.rate) * _exact(profile.scale) for s in profile.segments)]
        self.counts = [s.count(profile.scale) for s in profile.segments]
        self.total = sum(self.counts)
        self.start_ns = start_ns
        self.end_ns = start_ns + sum(self.durations_ns)
        self.state = PaceState(0, start_ns, 0, self.rates[0])
        self.sent = 0
        self._skip_exhausted()

    # -- schedule arithmetic -------------------------------------------------

    def _deadline(self, seg: int, seg_start: int, k: int) -> int:
        # seg_start + k / rate seconds, rounded half to even
        p, q = self._frac[seg]
        n, r = divmod(k * NS * q, p)
        twice = 2 * r
        if twice > p or (twice == p and n & 1):
            n += 1
        return seg_start + n

    def _count_le(self, seg: int, seg_start: int, now_ns: int) -> int:
        """Number of deadlines of segment ``seg`` at or before ``now_ns``."""
        n = self.counts[seg]
        if n == 0 or now_ns < seg_start:
            return 0
        k = int((now_ns - seg_start) * self.rates[seg] / NS) + 1
        k = min(max(k, 0), n)
        while k > 0 and self._deadline(seg, seg_start, k - 1) > now_ns:
            k -= 1
        while k < n and self._deadline(seg, seg_start, k) <= now_ns:
            k += 1
        return k

    def _skip_exhausted(self) -> None:
        st = self.state
        while st.segment_index < len(self.counts) and st.sent_in_segment >= self.counts[st.segment_index]:
            st.segment_start_ns += self.durations_ns[st.segment_index]
            st.segment_index += 1
            st.sent_in_segment = 0
            if st.segment_index < len(self.counts):
                st.target_rate = self.rates[st.segment_index]

    # -- public API -----------------------------------------------------------

    @property
    def exhausted(self) -> bool:
        return self.state.segment_index >= len(self.counts)

    def peek(self) -> Optional[int]:
        """Deadline of the next notification, or ``None`` when the profile is done."""
        st = self.state
        if self.exhausted:
            return None
        return self._deadline(st.segment_index, st.segment_start_ns, st.sent_in_segment)

    def next_deadline(self) -> Optional[int]:
        """Deadline of the next notification, consuming it."""
        st = self.state
        if self.exhausted:
            return None
        d = self._deadline(st.segment_index, st.segment_start_ns, st.sent_in_segment)
        st.carry_ns = st.sent_in_segment * NS / st.target_rate - (d - st.segment_start_ns)
        st.sent_in_segment += 1
        self.sent += 1
        self._skip_exhausted()
        return d

    def take_due(self, now_ns: int, limit: Optional[int] = None) -> int:
        """Consume every notification due by ``now_ns`` (at most ``limit``)."""
        taken = 0
        st = self.state
        while not self.exhausted and (limit is None or taken < limit):
            seg = st.segment_index
            k = self._count_le(seg, st.segment_start_ns, now_ns)
            due = k - st.sent_in_segment
            if due <= 0:
                break
            if limit is not None:
                due = min(due, limit - taken)
            st.sent_in_segment += due
            taken += due
            self._skip_exhausted()
        self.sent += taken
        return taken

    def intended_by(self, now_ns: int) -> int:
        """Cumulative notifications the schedule wants sent by ``now_ns``."""
        total = 0
        seg_start = self.start_ns
        for i, n in enumerate(self.counts):
            if now_ns < seg_start:
                break
            if now_ns >= seg_start + self.durations_ns[i]:
                total += n
            else:
                total += self._count_le(i, seg_start, now_ns)
                break
            seg_start += self.durations_ns[i]
        return total

    def deadlines(self) -> Iterator[int]:
        while True:
            d = self.next_deadline()
            if d is None:
                return
            yield d


def wait_until(
    deadline_ns: int,
    spin_threshold_ns: int = DEFAULT_SPIN_THRESHOLD_NS,
    clock: Callable[[], int] = time.monotonic_ns,
) -> int:
    """Sleep, then busy-spin the last ``spin_threshold_ns``; returns the wake time."""
    now = clock()
    remaining = deadline_ns - now
    if remaining > spin_threshold_ns:
        time.sleep((remaining - spin_threshold_ns) / NS)
        now = clock()
    while now < deadline_ns:
        now = clock()
    return now


def achieved_rate(
    timestamps_ns: Sequence[int] | np.ndarray,
    start_ns: int,
    duration_s: Optional[int] = None,
    window_ns: int = NS,
    counts: Optional[Sequence[int] | np.ndarray] = None,
) -> np.ndarray:
    """Messages per second in consecutive windows from ``start_ns``.

    ``counts`` gives the number of messages behind each timestamp (batched
    sends). With ``duration_s``, exactly that many windows are reported and
    anything stamped past the end is charged to the last window.
    """
    ts = np.asarray(timestamps_ns, dtype=np.int64)
    if duration_s is None:
        if len(ts) == 0:
            return np.zeros(0)
        nwin = int((ts.max() - start_ns) // window_ns) + 1
    else:
        nwin = int(duration_s * NS // window_ns)
    if nwin <= 0:
        return np.zeros(0)
    idx = np.clip((ts - start_ns) // window_ns, 0, nwin - 1)
    w = None if counts is None else np.asarray(counts, dtype=np.float64)
    per = np.bincount(idx, weights=w, minlength=nwin)[:nwin]
    return per * (NS / window_ns)


class RateMeter:
    """Per-window send counter cheap enough for the publish loop."""

    def __init__(self, start_ns: int, window_ns: int = NS):
        self.start_ns = start_ns
        self.window_ns = window_ns
        self.counts: List[int] = []

    def add(self, now_ns: int, n: int) -> None:
        i = (now_ns - self.start_ns) // self.window_ns
        if i < 0:
            i = 0
        c = self.counts
        if i >= len(c):
            c.extend([0] * (i + 1 - len(c)))
        c[i] += n

    def rates(self, nwindows: Optional[int] = None) -> np.ndarray:
        c = np.array(self.counts, dtype=np.float64)
        if nwindows is not None:
            if len(c) > nwindows:
                c[nwindows - 1] += c[nwindows:].sum()
                c = c[:nwindows]
            elif len(c) < nwindows:
                c = np.concatenate([c, np.zeros(nwindows - len(c))])
        return c * (NS / self.window_ns)
