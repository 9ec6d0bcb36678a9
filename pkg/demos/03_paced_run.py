"""
A paced loopback run, verified
==============================

Publish on a fixed schedule, log a latency record per notification, then
check delivery and timing.
"""

import tempfile
from pathlib import Path

from wrench.engine import run_loopback
from wrench.latlog import format_summary, summarize
from wrench.manifest import RunManifest
from wrench.verify import verify_log
from wrench.workload import WorkloadSpec, profile_from_pairs

out = Path(tempfile.mkdtemp())
spec = WorkloadSpec(profile_from_pairs([(2, 10_000), (2, 30_000), (1, 5_000)]), seed=7)
run = run_loopback(spec, out / "run.wrll", workers=1)

print("sent %d of %d in %.2f s" % (run.manifest.sent_total, run.manifest.intended_total, run.publisher.elapsed_s))
print("achieved rate per second:", [round(r) for r in run.publisher.rates()])
print("slippage %.4f%% (max lag %d)" % (100 * run.publisher.slippage, run.publisher.max_lag))

report = verify_log(run.log_path, RunManifest.read(run.manifest_path))
print(report.to_table())
print(format_summary(summarize(run.log_path, "payload_band")))
print("artifacts:", sorted(p.name for p in out.iterdir()))
