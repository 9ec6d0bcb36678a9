"""
Capture a feed, replay it faster
================================

A snapshot keeps every frame with the gap since the previous arrival.
Replaying at time scale 2 plays the same bytes in half the time.
"""

import os
import tempfile
import threading
from pathlib import Path

from wrench.engine import PublisherOptions, read_snapshot, record_snapshot, replay_duration_s, run_publisher
from wrench.transport import LoopbackTransport
from wrench.workload import WorkloadSpec, profile_from_pairs

out = Path(tempfile.mkdtemp())
snap = out / "feed.wrsn"

feed = LoopbackTransport()
box = {}
recorder = threading.Thread(target=lambda: box.update(info=record_snapshot(feed.subscribe(), snap)))
recorder.start()
run_publisher(WorkloadSpec(profile_from_pairs([(1, 5_000), (1, 20_000)]), seed=5), feed, workers=1)
feed.close()
recorder.join()
info = box["info"]
print("captured %d frames over %.3f s" % (info.frames, info.duration_ns / 1e9))

deltas, frames = read_snapshot(snap)
for scale in (1.0, 2.0):
    sink = LoopbackTransport(queue_capacity=1 << 17)
    got = []
    reader = threading.Thread(target=lambda: got.extend(f for b in sink.subscribe() for f in b.frames()))
    reader.start()
    _, stats = run_publisher(os.fspath(snap), sink, options=PublisherOptions(time_scale=scale, restamp=False))
    sink.close()
    reader.join()
    print("x%g: %.3f s (expected %.3f s), bytes identical: %s"
          % (scale, replay_duration_s(stats), deltas.sum() / 1e9 / scale, got == frames))
