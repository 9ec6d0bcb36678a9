"""
Checking the checker
====================

The faulty loopback drops, duplicates and reorders frames from a seeded
generator and keeps a ledger. The verifier, which never sees the ledger,
has to arrive at the same numbers.
"""

import tempfile
from pathlib import Path

from wrench.engine import run_loopback
from wrench.manifest import RunManifest
from wrench.transport import FaultParams, TransportConfig
from wrench.verify import verify_log
from wrench.workload import WorkloadSpec, profile_from_pairs

out = Path(tempfile.mkdtemp())
faults = FaultParams(drop_prob=0.02, dup_prob=0.01, reorder_prob=0.01, reorder_window=4, seed=11)
spec = WorkloadSpec(profile_from_pairs([(1, 50_000)]), seed=3)
run = run_loopback(spec, out / "faulty.wrll", TransportConfig("loopback-faulty", fault=faults), workers=2)

print("injector ledger:", run.ledger)
report = verify_log(run.log_path, RunManifest.read(run.manifest_path))
a = report.aggregate
print("verifier: gaps=%d duplicates=%d out_of_order=%d" % (a.gaps, a.duplicates, a.out_of_order))
print("ledger matches:", report.ledger_matches())
print("verdicts:", report.verdicts)
