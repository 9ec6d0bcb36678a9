"""
The notification wire format
============================

29 header bytes, filler payload, and a checksum byte; a u32 length in front
of each frame on the wire.
"""

import numpy as np

from wrench.codec import (
    CorruptFrame,
    NotificationHeader,
    decode_batch,
    decode_notification,
    encode_batch,
    encode_notification,
    frame,
    make_headers,
)

h = NotificationHeader(priority=1, event_type=2, stream_id=3, sequence=42, send_ts_ns=1_700_000_000_000_000_000,
                       symbol_id=12345, attr_count=16)
raw = encode_notification(h, 64)
wire = frame(raw)

def hexdump(data, width=16):
    for off in range(0, len(data), width):
        chunk = data[off:off + width]
        print("%04x  %-48s" % (off, " ".join("%02x" % b for b in chunk)))

print("framed notification, %d bytes on the wire:" % len(wire))
hexdump(wire)

# decoding returns the header and the payload length
print(decode_notification(raw))

# any single flipped byte breaks the XOR checksum
bad = bytearray(raw)
bad[40] ^= 0x01
try:
    decode_notification(bytes(bad))
except CorruptFrame as exc:
    print("corrupt:", exc)

# the batch codec does the same for many frames at once
hdr = make_headers(5)
hdr["stream_id"] = 3
hdr["sequence"] = np.arange(5)
batch = encode_batch(hdr, np.array([29, 30, 64, 128, 1024]))
print("batch of %d frames, %d bytes" % (len(batch), len(batch.data)))
dec = decode_batch(batch)
print("payload sizes:", dec.payload_sizes.tolist(), "corrupt:", dec.corrupt.tolist())
