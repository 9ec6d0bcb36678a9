"""Named benchmark scenarios: publish, subscribe and verify in one command.

A scenario is a committed ``.conf`` file holding a workload spec plus a few
runner keys (transport, workers, criteria). ``run_scenario`` writes the log,
manifest, rate CSV and reports into a run directory and returns whether the
scenario's criteria held.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Tuple

import numpy as np

from .engine import LoopbackRun, PublisherOptions, run_loopback
from .kvfile import as_bool, format_kv, read_kv
from .latlog import format_summary, summarize, summary_to_csv
from .manifest import RunManifest
from .transport import FaultParams, TransportConfig
from .verify import DEFAULT_SLO_PERCENTILE, QoSReport, verify_log
from .workload import WorkloadSpec, expected_total, scale_profile, truncate_profile, workload_from_kv

log = logging.getLogger(__name__)

VERDICTS = ("exactly_once", "ordered", "complete", "latency_slo")
_RUNNER_KEYS = {
    "name", "description", "transport", "workers", "criteria", "downscale", "max_slippage",
    "probe_seconds", "drop", "dup", "reorder", "reorder_window", "fault_seed", "slo_ms",
}


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    workload: WorkloadSpec
    description: str = ""
    transport: str = "loopback"
    workers: int = 1
    criteria: Tuple[str, ...] = ("complete", "exactly_once", "ordered")
    downscale: bool = False
    max_slippage: float = 0.001
    probe_seconds: int = 3
    fault: FaultParams = field(default_factory=FaultParams)
    slo_ms: float = 20.0
    path: str = ""


def scenario_dir() -> str:
    return str(resources.files("wrench") / "data" / "scenarios")


def list_scenarios() -> List[str]:
    return sorted(f[:-5] for f in os.listdir(scenario_dir()) if f.endswith(".conf"))


def load_scenario(name_or_path: str) -> Scenario:
    """Load a committed scenario by name, or any ``.conf`` file by path."""
    path = name_or_path
    if not os.path.exists(path):
        path = os.path.join(scenario_dir(), f"{name_or_path}.conf")
        if not os.path.exists(path):
            raise ScenarioError(f"unknown scenario {name_or_path!r}; known: {', '.join(list_scenarios())}")
    kv = read_kv(path)
    runner = {k: kv.pop(k) for k in list(kv) if k in _RUNNER_KEYS}
    spec = workload_from_kv(kv, base_dir=os.path.dirname(os.path.abspath(path)))
    criteria = tuple(c.strip() for c in runner.get("criteria", "complete,exactly_once,ordered").split(",") if c.strip())
    bad = [c for c in criteria if c not in VERDICTS]
    if bad:
        raise ScenarioError(f"{path}: unknown criteria {bad}; choose from {', '.join(VERDICTS)}")
    return Scenario(
        name=runner.get("name", os.path.basename(path)[:-5]),
        workload=spec,
        description=runner.get("description", ""),
        transport=runner.get("transport", "loopback"),
        workers=int(runner.get("workers", "1")),
        criteria=criteria,
        downscale=as_bool(runner.get("downscale", "false")),
        max_slippage=float(runner.get("max_slippage", "0.001")),
        probe_seconds=int(runner.get("probe_seconds", "3")),
        fault=FaultParams(
            float(runner.get("drop", "0")),
            float(runner.get("dup", "0")),
            float(runner.get("reorder", "0")),
            int(runner.get("reorder_window", "2")),
            int(runner.get("fault_seed", "0")),
        ),
        slo_ms=float(runner.get("slo_ms", "20")),
        path=path,
    )


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    run_dir: str
    factor: float
    report: QoSReport
    manifest: RunManifest
    sustained_rate: float
    peak_window_rate: float
    probes: List[Tuple[float, float]] = field(default_factory=list)  # (factor, slippage)

    @property
    def slippage(self) -> float:
        return self.manifest.slippage


def _probe(sc: Scenario, factor: float, run_dir: str, options: PublisherOptions) -> float:
    """Slippage of a short run at ``factor``, relative to the full run's total."""
    full = expected_total(scale_profile(sc.workload.profile, factor))
    profile = truncate_profile(scale_profile(sc.workload.profile, factor), sc.probe_seconds)
    spec = sc.workload.with_profile(profile)
    path = os.path.join(run_dir, "probe.wrll")
    run = run_loopback(spec, path, TransportConfig(sc.transport if sc.transport != "tcp" else "loopback", fault=sc.fault),
                       workers=sc.workers, options=options)
    for suffix in (".wrll", ".manifest", ".rates.csv"):
        try:
            os.remove(os.path.join(run_dir, "probe" + suffix))
        except FileNotFoundError:
            pass
    return run.publisher.max_lag / full if full else 0.0


def choose_factor(sc: Scenario, run_dir: str, options: PublisherOptions, refine: int = 2) -> Tuple[float, List[Tuple[float, float]]]:
    """Largest scale factor whose probe stays under the slippage limit.

    Tries 1, 1/2, 1/4, ... until a probe passes, then bisects ``refine``
    times between the passing factor and the one above it.
    """
    probes: List[Tuple[float, float]] = []
    f = 1.0
    while True:
        s = _probe(sc, f, run_dir, options)
        probes.append((f, s))
        log.info("probe factor %.4g slippage %.3g%%", f, 100 * s)
        if s < sc.max_slippage:
            break
        if f < 1e-3:
            raise ScenarioError("host cannot sustain even 0.1% of the scenario rate")
        f /= 2
    lo, hi = f, min(1.0, 2 * f)
    for _ in range(refine if lo < 1.0 else 0):
        mid = (lo + hi) / 2
        s = _probe(sc, mid, run_dir, options)
        probes.append((mid, s))
        log.info("probe factor %.4g slippage %.3g%%", mid, 100 * s)
        if s < sc.max_slippage:
            lo = mid
        else:
            hi = mid
    return lo, probes


def _run_tcp(spec_path: str, log_path: str, manifest_path: str, workers: int, seed: int) -> RunManifest:
    """Publisher and subscriber as separate processes over local TCP."""
    import socket

    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    endpoint = f"127.0.0.1:{port}"
    py = [sys.executable, "-m", "wrench"]
    sub = subprocess.Popen(py + ["subscribe", "--transport", "tcp", "--endpoint", endpoint, "--log", log_path,
                                 "--connections", str(workers)])
    try:
        time.sleep(0.3)
        pub = subprocess.run(py + ["publish", "--workload", spec_path, "--transport", "tcp", "--endpoint", endpoint,
                                   "--workers", str(workers), "--manifest", manifest_path, "--seed", str(seed)])
        if pub.returncode != 0:
            raise ScenarioError(f"publisher exited with {pub.returncode}")
        if sub.wait(timeout=120) != 0:
            raise ScenarioError(f"subscriber exited with {sub.returncode}")
    finally:
        if sub.poll() is None:
            sub.kill()
    return RunManifest.read(manifest_path)


def run_scenario(
    name: str,
    run_dir: Optional[str] = None,
    seed: Optional[int] = None,
    factor: Optional[float] = None,
    transport: Optional[str] = None,
    options: Optional[PublisherOptions] = None,
) -> ScenarioResult:
    """Run a scenario end to end and write its artifacts.

    ``factor`` pins the rate scale; otherwise scenarios marked ``downscale``
    probe for the largest factor the host sustains.
    """
    sc = load_scenario(name)
    if transport:
        sc = dataclasses.replace(sc, transport=transport)
    if seed is not None:
        sc = dataclasses.replace(sc, workload=dataclasses.replace(sc.workload, seed=seed))
    run_dir = run_dir or os.path.join("runs", f"{sc.name}-{time.strftime('%Y%m%d-%H%M%S')}")
    os.makedirs(run_dir, exist_ok=True)
    options = options or PublisherOptions()

    probes: List[Tuple[float, float]] = []
    if factor is None:
        factor = 1.0
        if sc.downscale:
            factor, probes = choose_factor(sc, run_dir, options)
    spec = sc.workload.with_profile(scale_profile(sc.workload.profile, factor)) if factor != 1.0 else sc.workload

    log_path = os.path.join(run_dir, "run.wrll")
    manifest_path = os.path.join(run_dir, "run.manifest")
    if sc.transport == "tcp":
        spec_path = os.path.join(run_dir, "workload.conf")
        _write_spec(spec, run_dir, spec_path)
        manifest = _run_tcp(spec_path, log_path, manifest_path, sc.workers, spec.seed)
        rates = None
    else:
        run: LoopbackRun = run_loopback(spec, log_path, TransportConfig(sc.transport, fault=sc.fault), workers=sc.workers,
                                        options=options, source_name=sc.path)
        manifest = run.manifest
        rates = run.publisher.rates()
    manifest.notes = f"scenario {sc.name}; rate factor {factor:.6g}"
    manifest.write(manifest_path)

    report = verify_log(log_path, manifest, slo_ns=int(sc.slo_ms * 1e6), slo_percentile=DEFAULT_SLO_PERCENTILE)
    passed = all(report.verdicts.get(c) is True for c in sc.criteria)
    sustained = manifest.sent_total / manifest.elapsed_s if manifest.elapsed_s > 0 else 0.0
    peak = float(np.max(rates)) if rates is not None and len(rates) else sustained
    result = ScenarioResult(sc.name, passed, run_dir, factor, report, manifest, sustained, peak, probes)
    _write_reports(sc, result, log_path)
    return result


def _write_spec(spec: WorkloadSpec, run_dir: str, spec_path: str) -> None:
    from .workload import format_rate_profile, format_workload_spec

    prof = os.path.join(run_dir, "profile.csv")
    with open(prof, "w", encoding="ascii") as fh:
        fh.write(format_rate_profile(spec.profile))
    with open(spec_path, "w", encoding="utf-8") as fh:
        fh.write(format_workload_spec(spec, "profile.csv"))


def _write_reports(sc: Scenario, res: ScenarioResult, log_path: str) -> None:
    m = res.manifest
    head = [
        f"scenario      {sc.name}",
        f"description   {sc.description}",
        f"transport     {sc.transport}",
        f"rate factor   {res.factor:.6g}" + ("  (auto-downscaled)" if res.probes else ""),
        f"intended      {m.intended_total}",
        f"sent          {m.sent_total}",
        f"scheduled     {m.scheduled_s:.3f} s",
        f"elapsed       {m.elapsed_s:.3f} s",
        f"sustained     {res.sustained_rate:,.0f} msg/s (peak 1 s window {res.peak_window_rate:,.0f})",
        f"slippage      {100 * m.slippage:.4f}% (max lag {m.max_lag} notifications)",
        f"criteria      {', '.join(sc.criteria)}",
        f"result        {'PASS' if res.passed else 'FAIL'}",
        "",
    ]
    for f, s in res.probes:
        head.insert(-1, f"probe         factor {f:.6g} -> slippage {100 * s:.4f}%")
    rows = summarize(log_path)
    with open(os.path.join(res.run_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(head) + "\n")
        fh.write(res.report.to_table())
        fh.write("\nlatency summary (us)\n")
        fh.write(format_summary(rows))
    with open(os.path.join(res.run_dir, "qos.csv"), "w", encoding="utf-8") as fh:
        fh.write(res.report.to_csv())
    with open(os.path.join(res.run_dir, "latency.csv"), "w", encoding="utf-8") as fh:
        fh.write(summary_to_csv(rows))
    items: Dict[str, object] = {
        "scenario": sc.name,
        "passed": res.passed,
        "factor": repr(res.factor),
        "sustained_rate": f"{res.sustained_rate:.1f}",
        "peak_window_rate": f"{res.peak_window_rate:.1f}",
        "slippage": repr(m.slippage),
    }
    items.update({f"verdict.{k}": ("unknown" if v is None else v) for k, v in res.report.verdicts.items()})
    with open(os.path.join(res.run_dir, "result.conf"), "w", encoding="utf-8") as fh:
        fh.write(format_kv(items, header="wrench scenario result"))
