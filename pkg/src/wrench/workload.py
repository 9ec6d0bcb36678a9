"""Workload definitions: rate profiles, size models, event-type mixes and sampling.

A :class:`WorkloadSpec` fully determines the notification parameters a
publisher emits. Sampling draws a fixed number of uniform doubles per
notification from a per-stream PCG64 generator, so the parameter sequence
for a given ``(seed, stream_id)`` does not depend on how callers batch their
requests.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .kvfile import KVError, as_bool, format_kv, parse_kv

INT64_MAX = 2**63 - 1

#: Smallest notification in the modelled feed (a tick).
TICK_MIN_BYTES = 80
#: Largest notification in the modelled feed (a news item, 31 kB).
NEWS_MAX_BYTES = 31744

#: Mean rate of the 60 s reference snapshot (18,023,662 notifications / 60 s).
SNAPSHOT_NOTIFICATIONS = 18_023_662
SNAPSHOT_SECONDS = 60
SNAPSHOT_MEAN_RATE = SNAPSHOT_NOTIFICATIONS // SNAPSHOT_SECONDS  # 300394
SNAPSHOT_SYMBOLS = 2_890_000

# uniforms consumed per notification: type, size bucket, size offset,
# symbol, attr half, attr position
_DRAWS = 6


class WorkloadError(ValueError):
    pass


def _exact(x: float | int) -> Fraction:
    # decimal repr, so "0.4" means 2/5 rather than the nearest binary double
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(float(x)))


# ---------------------------------------------------------------------------
# rate profiles


@dataclass(frozen=True)
class RateSegment:
    duration_s: int
    rate: float

    def __post_init__(self):
        if isinstance(self.duration_s, bool) or not isinstance(self.duration_s, (int, np.integer)):
            raise WorkloadError(f"duration_s must be an integer, got {self.duration_s!r}")
        if self.duration_s < 1:
            raise WorkloadError(f"duration_s must be >= 1, got {self.duration_s}")
        if not math.isfinite(self.rate) or self.rate < 0:
            raise WorkloadError(f"rate must be finite and >= 0, got {self.rate}")

    def count(self, scale: float = 1.0) -> int:
        """Notifications scheduled in this segment, rounded half-to-even."""
        return round(self.duration_s * _exact(self.rate) * _exact(scale))


@dataclass(frozen=True)
class RateProfile:
    segments: Tuple[RateSegment, ...]
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise WorkloadError("rate profile needs at least one segment")
        if not math.isfinite(self.scale) or self.scale <= 0:
            raise WorkloadError(f"scale must be finite and > 0, got {self.scale}")

    @property
    def total_duration(self) -> int:
        return sum(s.duration_s for s in self.segments)

    def effective_rates(self) -> List[float]:
        return [s.rate * self.scale for s in self.segments]

    def expected_total(self) -> int:
        return expected_total(self)


def parse_rate_profile(text: str, source: str = "<profile>") -> RateProfile:
    """Parse ``duration_s,rate`` lines; ``#`` lines are comments."""
    segments = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise WorkloadError(f"{source}:{lineno}: expected 'duration_s,rate', got {raw!r}")
        try:
            duration = int(parts[0])
        except ValueError:
            raise WorkloadError(f"{source}:{lineno}: duration must be an integer number of seconds, got {parts[0]!r}") from None
        try:
            rate = float(parts[1])
        except ValueError:
            raise WorkloadError(f"{source}:{lineno}: rate is not a number: {parts[1]!r}") from None
        try:
            segments.append(RateSegment(duration, rate))
        except WorkloadError as exc:
            raise WorkloadError(f"{source}:{lineno}: {exc}") from None
    if not segments:
        raise WorkloadError(f"{source}: empty rate profile")
    return RateProfile(tuple(segments))


def load_rate_profile(path: str | os.PathLike) -> RateProfile:
    with open(path, encoding="utf-8") as fh:
        return parse_rate_profile(fh.read(), source=str(path))


def format_rate_profile(profile: RateProfile, comment: str | None = None) -> str:
    lines = []
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    for seg in profile.segments:
        rate = float(_exact(seg.rate) * _exact(profile.scale))
        lines.append(f"{seg.duration_s},{int(rate) if float(rate).is_integer() else repr(rate)}")
    return "\n".join(lines) + "\n"


def scale_profile(profile: RateProfile, factor: float, durations: bool = False) -> RateProfile:
    """Multiply every segment rate by ``factor``.

    With ``durations=True`` segment lengths are scaled too (rounded half to
    even, must stay >= 1 s).
    """
    if not isinstance(factor, (int, float)) or not math.isfinite(factor) or factor <= 0:
        raise WorkloadError(f"scale factor must be finite and > 0, got {factor!r}")
    segs = []
    for s in profile.segments:
        rate = float(_exact(s.rate) * _exact(factor))
        dur = s.duration_s
        if durations:
            dur = round(_exact(dur) * _exact(factor))
            if dur < 1:
                raise WorkloadError(f"scaling a {s.duration_s} s segment by {factor} leaves no time")
        segs.append(RateSegment(int(dur), rate))
    return RateProfile(tuple(segs), profile.scale)


def expected_total(profile: RateProfile) -> int:
    """Sum of per-segment rounded counts; ground truth for completeness."""
    total = sum(seg.count(profile.scale) for seg in profile.segments)
    if total > INT64_MAX:
        raise OverflowError(f"expected total {total} exceeds 2^63-1")
    return total


def split_profile(profile: RateProfile, workers: int) -> RateProfile:
    """Per-worker profile: every rate divided evenly across ``workers``."""
    if workers < 1:
        raise WorkloadError("workers must be >= 1")
    if workers == 1:
        return profile
    segs = tuple(RateSegment(s.duration_s, float(_exact(s.rate) / workers)) for s in profile.segments)
    return RateProfile(segs, profile.scale)


def snapshot_profile() -> RateProfile:
    """Flat 60 s profile at the reference snapshot's mean rate."""
    return RateProfile((RateSegment(SNAPSHOT_SECONDS, float(SNAPSHOT_MEAN_RATE)),))


# hourly shape of a trading day, peak = 1.0; illustrative only
_DAY_SHAPE = [
    0.03, 0.02, 0.02, 0.02, 0.02, 0.03, 0.05, 0.12,  # 00-07 overnight trough
    0.55, 1.00, 0.70, 0.60, 0.55, 0.55, 0.60, 0.95,  # 08 pre-open, 09 open spike, midday, 15 US open
    0.85, 0.90, 0.40, 0.20, 0.12, 0.08, 0.05, 0.04,  # 17 close spike, evening decay
]


def illustrative_daily_profile(peak_rate: float = 1_000_000.0, segment_s: int = 900) -> RateProfile:
    """24 h profile with an overnight trough, open spike, midday plateau and
    close spike. The shape is an approximation for demos, not measured data."""
    if 3600 % segment_s:
        raise WorkloadError("segment_s must divide an hour")
    per_hour = 3600 // segment_s
    segs = []
    for hour, level in enumerate(_DAY_SHAPE):
        nxt = _DAY_SHAPE[(hour + 1) % 24]
        for i in range(per_hour):
            frac = level + (nxt - level) * i / per_hour
            segs.append(RateSegment(segment_s, float(round(peak_rate * frac))))
    return RateProfile(tuple(segs))


# ---------------------------------------------------------------------------
# size model


@dataclass(frozen=True)
class SizeModel:
    """Piecewise histogram of total notification sizes in bytes.

    ``buckets`` holds inclusive ``(lo, hi, weight)`` ranges; sizes are uniform
    within a bucket.
    """

    buckets: Tuple[Tuple[int, int, float], ...]
    min_bytes: int = TICK_MIN_BYTES
    max_bytes: int = NEWS_MAX_BYTES

    def __post_init__(self):
        object.__setattr__(self, "buckets", tuple((int(lo), int(hi), float(w)) for lo, hi, w in self.buckets))
        if not self.buckets:
            raise WorkloadError("size model needs at least one bucket")
        if self.max_bytes > NEWS_MAX_BYTES:
            raise WorkloadError(f"max_bytes must be <= {NEWS_MAX_BYTES}")
        if self.min_bytes < 29:
            raise WorkloadError("min_bytes must cover the 29-byte header")
        prev_hi = None
        for lo, hi, w in self.buckets:
            if lo > hi:
                raise WorkloadError(f"bucket [{lo}, {hi}] is inverted")
            if prev_hi is not None and lo <= prev_hi:
                raise WorkloadError("size buckets must be ascending and non-overlapping")
            if lo < self.min_bytes or hi > self.max_bytes:
                raise WorkloadError(f"bucket [{lo}, {hi}] outside [{self.min_bytes}, {self.max_bytes}]")
            if w < 0:
                raise WorkloadError("bucket weights must be >= 0")
            prev_hi = hi
        total = sum(w for _, _, w in self.buckets)
        if abs(total - 1.0) > 1e-9:
            raise WorkloadError(f"size bucket weights sum to {total}, expected 1")

    def mean(self) -> float:
        return sum(w * (lo + hi) / 2 for lo, hi, w in self.buckets)

    @classmethod
    def fixed(cls, size: int) -> "SizeModel":
        return cls(((size, size, 1.0),), min_bytes=min(size, TICK_MIN_BYTES), max_bytes=max(size, TICK_MIN_BYTES))


# 80-900 B tick-feed histogram; weights chosen so the mean is 127.6 B
# (2.3 GB over 18,023,662 notifications). Large news items are excluded.
DEFAULT_SIZE_MODEL = SizeModel(
    (
        (80, 95, 0.3545),
        (96, 111, 0.25),
        (112, 127, 0.14),
        (128, 159, 0.105),
        (160, 191, 0.0605),
        (192, 255, 0.045),
        (256, 383, 0.027),
        (384, 511, 0.012),
        (512, 900, 0.006),
    )
)


# ---------------------------------------------------------------------------
# event types


@dataclass(frozen=True)
class AttrModel:
    """Attribute-count distribution: a two-sided triangle peaking at the median."""

    min: int = 6
    median: int = 16
    max: int = 129

    def __post_init__(self):
        if not 1 <= self.min <= self.median <= self.max <= 255:
            raise WorkloadError(f"attribute model needs 1 <= min <= median <= max <= 255, got {self}")


@dataclass(frozen=True)
class EventType:
    type_id: int
    weight: float
    attrs: AttrModel = field(default_factory=AttrModel)
    name: str = ""


@dataclass(frozen=True)
class EventTypeMix:
    entries: Tuple[EventType, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        n = len(self.entries)
        if not 1 <= n <= 255:
            raise WorkloadError(f"event type mix needs 1..255 entries, got {n}")
        ids = [e.type_id for e in self.entries]
        if len(set(ids)) != n or not all(0 <= i <= 255 for i in ids):
            raise WorkloadError("event type ids must be unique and in 0..255")
        if any(e.weight < 0 for e in self.entries):
            raise WorkloadError("event type weights must be >= 0")
        total = sum(e.weight for e in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise WorkloadError(f"event type weights sum to {total}, expected 1")

    @property
    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.entries])


DEFAULT_TYPE_MIX = EventTypeMix(
    (
        EventType(0, 0.42, name="quote"),
        EventType(1, 0.22, name="trade"),
        EventType(2, 0.12, name="depth"),
        EventType(3, 0.08, name="bid"),
        EventType(4, 0.06, name="ask"),
        EventType(5, 0.05, name="statistics"),
        EventType(6, 0.03, name="status"),
        EventType(7, 0.02, name="reference"),
    )
)


# ---------------------------------------------------------------------------
# workload spec and sampling


@dataclass(frozen=True)
class WorkloadSpec:
    profile: RateProfile
    size_model: SizeModel = DEFAULT_SIZE_MODEL
    type_mix: EventTypeMix = DEFAULT_TYPE_MIX
    symbol_count: int = SNAPSHOT_SYMBOLS
    seed: int = 0
    # priority byte per publisher stream, cycled across workers
    priorities: Tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.symbol_count < 1 or self.symbol_count > 2**32:
            raise WorkloadError("symbol_count must be in 1..2^32")
        if not -(2**63) <= self.seed < 2**64:
            raise WorkloadError("seed must fit in 64 bits")
        object.__setattr__(self, "priorities", tuple(int(p) for p in self.priorities))
        if not self.priorities or not all(0 <= p <= 255 for p in self.priorities):
            raise WorkloadError("priorities must be a non-empty list of bytes")

    def with_profile(self, profile: RateProfile) -> "WorkloadSpec":
        return replace(self, profile=profile)


class Notification(NamedTuple):
    event_type: int
    symbol_id: int
    attr_count: int
    payload_size: int


class NotificationBatch(NamedTuple):
    event_type: np.ndarray  # uint8
    symbol_id: np.ndarray  # uint32
    attr_count: np.ndarray  # uint16
    payload_size: np.ndarray  # int64, total notification bytes

    def __len__(self):
        return len(self.event_type)

    def __getitem__(self, i):  # type: ignore[override]
        if isinstance(i, (int, np.integer)):
            return Notification(int(self.event_type[i]), int(self.symbol_id[i]), int(self.attr_count[i]), int(self.payload_size[i]))
        return NotificationBatch(self.event_type[i], self.symbol_id[i], self.attr_count[i], self.payload_size[i])


def stream_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent generator for one publisher stream."""
    ss = np.random.SeedSequence(entropy=seed % 2**64, spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))


class _Tables:
    """Precomputed lookup arrays for vectorised sampling."""

    def __init__(self, spec: WorkloadSpec):
        mix = spec.type_mix
        self.type_cdf = np.cumsum(mix.weights)
        self.type_cdf[-1] = 1.0
        self.type_ids = np.array([e.type_id for e in mix.entries], dtype=np.uint8)
        self.attr_min = np.array([e.attrs.min for e in mix.entries], dtype=np.float64)
        self.attr_med = np.array([e.attrs.median for e in mix.entries], dtype=np.float64)
        self.attr_max = np.array([e.attrs.max for e in mix.entries], dtype=np.float64)
        sm = spec.size_model
        self.size_cdf = np.cumsum([w for _, _, w in sm.buckets])
        self.size_cdf[-1] = 1.0
        self.size_lo = np.array([lo for lo, _, _ in sm.buckets], dtype=np.int64)
        self.size_span = np.array([hi - lo + 1 for lo, hi, _ in sm.buckets], dtype=np.int64)
        self.symbols = spec.symbol_count


def _tables(spec: WorkloadSpec) -> _Tables:
    # WorkloadSpec is frozen, so the cache can live beside it
    cache = _tables.cache  # type: ignore[attr-defined]
    t = cache.get(id(spec))
    if t is None or t[0] is not spec:
        t = (spec, _Tables(spec))
        if len(cache) > 64:
            cache.clear()
        cache[id(spec)] = t
    return t[1]


_tables.cache = {}  # type: ignore[attr-defined]


def _from_uniforms(tab: _Tables, u: np.ndarray) -> NotificationBatch:
    ti = np.searchsorted(tab.type_cdf, u[:, 0], side="right")
    np.minimum(ti, len(tab.type_cdf) - 1, out=ti)
    bi = np.searchsorted(tab.size_cdf, u[:, 1], side="right")
    np.minimum(bi, len(tab.size_cdf) - 1, out=bi)
    span = tab.size_span[bi]
    size = tab.size_lo[bi] + np.minimum((u[:, 2] * span).astype(np.int64), span - 1)
    sym = np.minimum((u[:, 3] * tab.symbols).astype(np.int64), tab.symbols - 1).astype(np.uint32)

    lo, med, hi = tab.attr_min[ti], tab.attr_med[ti], tab.attr_max[ti]
    root = np.sqrt(u[:, 5])
    lower = u[:, 4] < 0.5
    x = np.where(lower, lo + (med - lo) * root, hi - (hi - med) * root)
    attrs = np.clip(np.rint(x), lo, hi).astype(np.uint16)
    return NotificationBatch(tab.type_ids[ti], sym, attrs, size)


def sample_batch(spec: WorkloadSpec, rng: np.random.Generator, n: int) -> NotificationBatch:
    """Draw ``n`` notification parameter tuples."""
    u = rng.random((n, _DRAWS))
    return _from_uniforms(_tables(spec), u)


def sample_notification(spec: WorkloadSpec, rng: np.random.Generator) -> Notification:
    """Draw one ``(event_type, symbol_id, attr_count, payload_size)`` tuple.

    Consumes the same generator state as ``sample_batch(spec, rng, 1)``.
    """
    return sample_batch(spec, rng, 1)[0]


# ---------------------------------------------------------------------------
# workload spec files


def _parse_buckets(value: str) -> Tuple[Tuple[int, int, float], ...]:
    out = []
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        rng_part, w = item.split(":")
        lo, hi = rng_part.split("-")
        out.append((int(lo), int(hi), float(w)))
    return tuple(out)


def _parse_types(value: str) -> Tuple[EventType, ...]:
    out = []
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        tid, w = int(parts[0]), float(parts[1])
        attrs = AttrModel()
        if len(parts) > 2 and parts[2]:
            a, m, b = (int(x) for x in parts[2].split("/"))
            attrs = AttrModel(a, m, b)
        name = parts[3] if len(parts) > 3 else ""
        out.append(EventType(tid, w, attrs, name))
    return tuple(out)


def workload_from_kv(kv: dict, base_dir: str | os.PathLike = ".") -> WorkloadSpec:
    """Build a :class:`WorkloadSpec` from parsed key-value pairs.

    ``profile`` is a CSV path relative to ``base_dir``; ``profile_inline``
    accepts ``duration:rate;...`` for one-off specs.
    """
    kv = dict(kv)
    try:
        if "profile" in kv:
            path = kv.pop("profile")
            if not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            profile = load_rate_profile(path)
        elif "profile_inline" in kv:
            text = kv.pop("profile_inline").replace(";", "\n").replace(":", ",")
            profile = parse_rate_profile(text, source="profile_inline")
        else:
            raise WorkloadError("workload spec needs 'profile' or 'profile_inline'")
        scale = float(kv.pop("scale", "1"))
        scale_durations = as_bool(kv.pop("scale_durations", "false"))
        if scale != 1.0:
            profile = scale_profile(profile, scale, durations=scale_durations)

        size_model = DEFAULT_SIZE_MODEL
        if "size_buckets" in kv or "size_min" in kv or "size_max" in kv:
            buckets = _parse_buckets(kv.pop("size_buckets")) if "size_buckets" in kv else DEFAULT_SIZE_MODEL.buckets
            size_model = SizeModel(
                buckets,
                min_bytes=int(kv.pop("size_min", TICK_MIN_BYTES)),
                max_bytes=int(kv.pop("size_max", NEWS_MAX_BYTES)),
            )
        type_mix = DEFAULT_TYPE_MIX
        if "event_types" in kv:
            type_mix = EventTypeMix(_parse_types(kv.pop("event_types")))
        spec = WorkloadSpec(
            profile=profile,
            size_model=size_model,
            type_mix=type_mix,
            symbol_count=int(kv.pop("symbol_count", SNAPSHOT_SYMBOLS)),
            seed=int(kv.pop("seed", "0")),
            priorities=tuple(int(p) for p in kv.pop("priorities", "0").split(",")),
        )
    except (KVError, ValueError) as exc:
        if isinstance(exc, WorkloadError):
            raise
        raise WorkloadError(str(exc)) from None
    if kv:
        raise WorkloadError(f"unknown workload keys: {', '.join(sorted(kv))}")
    return spec


def parse_workload_spec(text: str, base_dir: str | os.PathLike = ".", source: str = "<spec>") -> WorkloadSpec:
    return workload_from_kv(parse_kv(text, source), base_dir)


def load_workload_spec(path: str | os.PathLike) -> WorkloadSpec:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_workload_spec(text, base_dir=os.path.dirname(os.path.abspath(path)), source=str(path))


def format_workload_spec(spec: WorkloadSpec, profile_path: str) -> str:
    """Serialise ``spec`` with its rates stored in ``profile_path`` (not written here)."""
    items = {
        "profile": profile_path,
        "symbol_count": spec.symbol_count,
        "seed": spec.seed,
        "priorities": ",".join(str(p) for p in spec.priorities),
        "size_min": spec.size_model.min_bytes,
        "size_max": spec.size_model.max_bytes,
        "size_buckets": ", ".join(f"{lo}-{hi}:{w!r}" for lo, hi, w in spec.size_model.buckets),
        "event_types": ", ".join(
            f"{e.type_id}:{e.weight!r}:{e.attrs.min}/{e.attrs.median}/{e.attrs.max}" + (f":{e.name}" if e.name else "")
            for e in spec.type_mix.entries
        ),
    }
    return format_kv(items, header="wrench workload spec")


def iter_segments(profile: RateProfile) -> Iterable[Tuple[int, float, int]]:
    """Yield ``(duration_s, effective_rate, count)`` per segment."""
    for seg in profile.segments:
        yield seg.duration_s, seg.rate * profile.scale, seg.count(profile.scale)


def profile_from_pairs(pairs: Sequence[Tuple[int, float]], scale: float = 1.0) -> RateProfile:
    return RateProfile(tuple(RateSegment(int(d), float(r)) for d, r in pairs), scale)


def truncate_profile(profile: RateProfile, seconds: int) -> RateProfile:
    """The first ``seconds`` of ``profile``; the last segment kept is clipped."""
    if seconds < 1:
        raise WorkloadError("duration override must be >= 1 s")
    segs = []
    left = seconds
    for s in profile.segments:
        if left <= 0:
            break
        segs.append(RateSegment(min(s.duration_s, left), s.rate))
        left -= s.duration_s
    return RateProfile(tuple(segs), profile.scale)
