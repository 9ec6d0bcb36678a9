"""
Shaping a synthetic feed
========================

A workload is a rate profile (how many notifications per second, segment by
segment) plus distributions for what each notification looks like.
"""

import numpy as np

from wrench.workload import (
    WorkloadSpec,
    expected_total,
    illustrative_daily_profile,
    parse_rate_profile,
    sample_batch,
    scale_profile,
    snapshot_profile,
    stream_rng,
)

# profiles are (duration_s, rate) rows; counts round half to even per segment
profile = parse_rate_profile("10,1000\n5,2000\n2,0\n")
print("segments:", profile.segments)
print("notifications:", expected_total(profile))  # 20000

# the reference minute: about 300k msg/s for 60 s
snap = snapshot_profile()
print("snapshot minute:", expected_total(snap), "notifications")
print("at 3.5x:", scale_profile(snap, 3.5).segments[0].rate, "msg/s")

# a 24 h shape for trying out long runs; the numbers are made up
day = illustrative_daily_profile(peak_rate=500_000)
rates = np.array([s.rate for s in day.segments])
print("day: %d segments, trough %.0f, peak %.0f msg/s" % (len(rates), rates.min(), rates.max()))

# what the notifications look like with the default models
spec = WorkloadSpec(profile, seed=42)
batch = sample_batch(spec, stream_rng(spec.seed), 200_000)
sizes = batch.payload_size
print("size: mean %.1f B, median %d B, p99 %d B, max %d B"
      % (sizes.mean(), np.median(sizes), np.percentile(sizes, 99), sizes.max()))
for type_id, n in zip(*np.unique(batch.event_type, return_counts=True)):
    print("  event type %d: %.2f%%" % (type_id, 100 * n / len(batch)))
print("attribute counts: median %d, mean %.1f" % (np.median(batch.attr_count), batch.attr_count.mean()))

# one seeded stream gives the same notifications however you slice it
a = sample_batch(spec, stream_rng(42, 0), 10)
rng = stream_rng(42, 0)
b = [sample_batch(spec, rng, 5), sample_batch(spec, rng, 5)]
assert np.array_equal(a.symbol_id, np.concatenate([x.symbol_id for x in b]))
