import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import DATA
from wrench.codec import (
    END_OF_STREAM,
    HEADER_DTYPE,
    HEADER_SIZE,
    MAX_FRAME,
    CodecError,
    CorruptFrame,
    FrameBatch,
    NotificationHeader,
    ShortFrame,
    UnknownVersion,
    decode_batch,
    decode_notification,
    encode_batch,
    encode_notification,
    frame,
    header_from_record,
    make_headers,
    restamp_batch,
    split_frames,
)

FIELDS = ["stream_id", "sequence", "send_ts_ns", "event_type", "priority", "symbol_id", "attr_count"]


def golden():
    out = []
    with open(os.path.join(DATA, "golden_frames.txt")) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.strip().split(",")
            fields = dict(zip(FIELDS, map(int, parts[:7])))
            out.append((fields, int(parts[7]), bytes.fromhex(parts[8])))
    return out


headers = st.builds(
    NotificationHeader,
    stream_id=st.integers(0, 2**32 - 1),
    sequence=st.integers(0, 2**64 - 1),
    send_ts_ns=st.integers(0, 2**64 - 1),
    event_type=st.integers(0, 255),
    priority=st.integers(0, 255),
    symbol_id=st.integers(0, 2**32 - 1),
    attr_count=st.integers(0, 2**16 - 1),
    version=st.just(1),
)
sizes = st.one_of(st.integers(HEADER_SIZE, 600), st.integers(HEADER_SIZE, MAX_FRAME), st.just(MAX_FRAME))


def test_all_zero_header():
    b = encode_notification(NotificationHeader(), 29)
    assert b == b"\x01" + bytes(28)


def test_small_roundtrip():
    h = NotificationHeader(stream_id=2, sequence=1)
    assert decode_notification(encode_notification(h, 80)) == (h, 80 - 29)


def test_golden_vectors_scalar():
    for fields, total, framed in golden():
        h = NotificationHeader(**fields)
        assert frame(encode_notification(h, total)) == framed
        assert decode_notification(framed[4:]) == (h, total - 29)


def test_golden_vectors_batch():
    g = golden()
    hdr = make_headers(len(g))
    for i, (fields, _, _) in enumerate(g):
        for k, v in fields.items():
            hdr[k][i] = v
    batch = encode_batch(hdr, np.array([t for _, t, _ in g]))
    assert batch.data == b"".join(f for _, _, f in g)
    dec = decode_batch(batch)
    assert not dec.corrupt.any()
    assert np.array_equal(dec.headers, hdr)


@settings(max_examples=150, deadline=None)
@given(headers, sizes)
def test_scalar_matches_oracle(h, n):
    fields = h._asdict()
    assert encode_notification(h, n) == oracles.encode(fields, n)
    assert decode_notification(encode_notification(h, n)) == (h, n - HEADER_SIZE)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(headers, st.integers(HEADER_SIZE, 400)), min_size=1, max_size=40))
def test_batch_matches_scalar(items):
    hdr = make_headers(len(items))
    for i, (h, _) in enumerate(items):
        for k in FIELDS:
            hdr[k][i] = getattr(h, k)
    batch = encode_batch(hdr, np.array([n for _, n in items]))
    assert batch.data == b"".join(frame(encode_notification(h, n)) for h, n in items)
    assert [batch.frame(i) for i in range(len(items))] == list(batch.frames())
    dec = decode_batch(batch)
    assert not dec.corrupt.any()
    assert dec.payload_sizes.tolist() == [n - HEADER_SIZE for _, n in items]
    for i, (h, _) in enumerate(items):
        assert header_from_record(dec.headers[i]) == h


def test_short_and_bad_version():
    with pytest.raises(ShortFrame):
        decode_notification(bytes(28))
    bad = bytearray(encode_notification(NotificationHeader(), 40))
    bad[0] = 9
    with pytest.raises(UnknownVersion):
        decode_notification(bytes(bad))


def test_flipped_filler_byte_is_corruption():
    raw = encode_notification(NotificationHeader(stream_id=3, sequence=77), 120)
    for pos in (HEADER_SIZE, 60, 118, 119):
        bad = bytearray(raw)
        bad[pos] ^= 0x40
        with pytest.raises(CorruptFrame):
            decode_notification(bytes(bad))


def test_batch_flags_corrupt_frames_only():
    hdr = make_headers(5)
    hdr["sequence"] = np.arange(5)
    batch = encode_batch(hdr, np.full(5, 100))
    data = bytearray(batch.data)
    data[int(batch.starts[2]) + 50] ^= 1
    # two compensating flips keep the XOR but break the filler pattern
    data[int(batch.starts[4]) + 40] ^= 3
    data[int(batch.starts[4]) + 41] ^= 3
    bad = FrameBatch(bytes(data), batch.starts, batch.sizes)
    assert decode_batch(bad, check_filler=False).corrupt.tolist() == [False, False, True, False, False]
    assert decode_batch(bad, check_filler=True).corrupt.tolist() == [False, False, True, False, True]


def test_size_bounds():
    with pytest.raises(CodecError):
        encode_notification(NotificationHeader(), 28)
    with pytest.raises(CodecError):
        encode_notification(NotificationHeader(), MAX_FRAME + 1)
    with pytest.raises(CodecError):
        encode_notification(NotificationHeader(stream_id=2**32), 40)
    with pytest.raises(CodecError):
        encode_batch(make_headers(1), np.array([28]))


def test_split_frames_partial_and_eos():
    batch = encode_batch(make_headers(3), np.array([40, 50, 60]))
    data = batch.data + END_OF_STREAM
    starts, sizes_, end, eos = split_frames(data)
    assert starts == batch.starts.tolist() and sizes_ == [40, 50, 60] and eos and end == len(data)
    starts, sizes_, end, eos = split_frames(data[:-10])
    assert sizes_ == [40, 50] and not eos and end == 4 + 40 + 4 + 50
    with pytest.raises(CorruptFrame):
        split_frames((MAX_FRAME + 1).to_bytes(4, "little") + bytes(10))


def test_restamp_keeps_checksums():
    hdr = make_headers(4)
    hdr["sequence"] = np.arange(4)
    batch = encode_batch(hdr, np.array([29, 30, 100, 500]))
    again = restamp_batch(batch, 123456789)
    dec = decode_batch(again)
    assert not dec.corrupt.any()
    assert (dec.headers["send_ts_ns"] == 123456789).all()
    hdr["send_ts_ns"] = 123456789
    assert again.data == encode_batch(hdr, np.array([29, 30, 100, 500])).data


def test_from_frames_and_empty():
    frames = [encode_notification(NotificationHeader(sequence=i), 29 + i) for i in range(5)]
    b = FrameBatch.from_frames(frames)
    assert list(b.frames()) == frames
    assert len(FrameBatch.empty()) == 0
    assert len(decode_batch(FrameBatch.empty()).headers) == 0


def test_header_dtype_layout():
    assert HEADER_DTYPE.itemsize == 29
    assert HEADER_DTYPE.fields["send_ts_ns"][1] == 15


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(headers, sizes), min_size=1, max_size=12))
def test_large_frame_path_matches_scalar(items):
    # mostly big frames, so the batch takes the per-frame assembly path
    items = items + [(NotificationHeader(sequence=7), MAX_FRAME)] * 3
    hdr = make_headers(len(items))
    for i, (h, _) in enumerate(items):
        for k in FIELDS:
            hdr[k][i] = getattr(h, k)
    batch = encode_batch(hdr, np.array([n for _, n in items]))
    assert batch.data == b"".join(frame(encode_notification(h, n)) for h, n in items)
    assert batch.data == b"".join(oracles.framed(h._asdict(), n) for h, n in items)
    dec = decode_batch(batch)
    assert not dec.corrupt.any() and np.array_equal(dec.headers, hdr)
