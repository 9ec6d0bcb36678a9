"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

from decimal import ROUND_HALF_EVEN, Decimal
from fractions import Fraction
from itertools import accumulate


def encode(fields: dict, total: int) -> bytes:
    """Notification bytes built field by field, byte by byte."""
    le = lambda v, n: int(v).to_bytes(n, "little")
    head = (
        bytes([fields.get("version", 1), fields["priority"], fields["event_type"]])
        + le(fields["stream_id"], 4)
        + le(fields["sequence"], 8)
        + le(fields["send_ts_ns"], 8)
        + le(fields["symbol_id"], 4)
        + le(fields["attr_count"], 2)
    )
    if total == 29:
        return head
    pat = le(fields["stream_id"] ^ fields["sequence"], 8)
    body = head + bytes(pat[i % 8] for i in range(total - 30))
    x = 0
    for b in body:
        x ^= b
    return body + bytes([x])


def framed(fields: dict, total: int) -> bytes:
    return total.to_bytes(4, "little") + encode(fields, total)


def segment_count(duration_s: int, rate: float, scale: float = 1.0) -> int:
    """Half-to-even rounding of duration x rate x scale in decimal arithmetic."""
    v = Decimal(duration_s) * Decimal(repr(float(rate))) * Decimal(repr(float(scale)))
    return int(v.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))


def deadline(start_ns: int, k: int, rate: float) -> int:
    """k-th deadline of a segment: start + k / rate seconds, rounded half-even to ns."""
    return start_ns + round(Fraction(k) * 10**9 / Fraction(repr(float(rate))))


def sequence_counts(seqs, intended=None):
    """(gaps, dups, out_of_order) for one stream from the complete list.

    gaps: sequences below max+1 (or ``intended``) never seen; dups: deliveries
    beyond the first per sequence; out_of_order: first deliveries below the
    running maximum of everything delivered before them.
    """
    seqs = list(seqs)
    unique = set(seqs)
    top = (max(seqs) + 1) if seqs else 0
    if intended is not None:
        top = max(top, intended)
    gaps = top - len(unique)
    dups = len(seqs) - len(unique)
    seen = set()
    ooo = 0
    prefix_max = [-1] + list(accumulate(seqs, max))
    for i, s in enumerate(seqs):
        if s not in seen:
            if s < prefix_max[i]:
                ooo += 1
            seen.add(s)
    return gaps, dups, ooo


def nearest_rank(values, q):
    v = sorted(values)
    import math

    return v[max(1, math.ceil(q * len(v))) - 1]
