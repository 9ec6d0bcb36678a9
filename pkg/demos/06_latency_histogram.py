"""
Percentiles without keeping every sample
========================================

The latency histogram has 1% wide buckets, so any percentile it reports
is within 1% of the exact nearest-rank value.
"""

import numpy as np

from wrench.latlog import LatencyHistogram, exact_quantile

rng = np.random.default_rng(0)
# mostly sub-millisecond, with a slow tail
lat = np.concatenate([
    rng.lognormal(np.log(200_000), 0.5, 990_000),
    rng.lognormal(np.log(20_000_000), 0.7, 10_000),
]).astype(np.int64)

h = LatencyHistogram()
for part in np.array_split(lat, 10):  # merged from pieces, as from many chunks of a log
    piece = LatencyHistogram()
    piece.record(part)
    h += piece

print("%8s %14s %14s %8s" % ("q", "exact_us", "histogram_us", "err"))
for q in (0.5, 0.9, 0.99, 0.999, 0.9999):
    exact = exact_quantile(lat, q)
    approx = h.quantile(q)
    print("%8g %14.1f %14.1f %7.3f%%" % (q, exact / 1e3, approx / 1e3, 100 * abs(approx - exact) / exact))
print("buckets used: %d of %d" % (np.count_nonzero(h.counts), len(h.counts)))
