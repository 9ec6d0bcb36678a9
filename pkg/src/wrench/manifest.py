"""Run manifests: the publisher's ground truth, read back by the verifier."""

from __future__ import annotations

import os
import uuid
from dataclasses import dataclass, field
from typing import Dict, Optional

from .kvfile import as_bool, read_kv, write_kv


@dataclass
class StreamPlan:
    intended: int
    sent: int = 0
    priority: int = 0


@dataclass
class RunManifest:
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    source: str = ""
    source_kind: str = "workload"  # or "snapshot"
    transport: str = "loopback"
    endpoint: str = ""
    workers: int = 1
    seed: int = 0
    scale: float = 1.0
    start_wall_ns: int = 0
    end_wall_ns: int = 0
    completed: bool = False
    scheduled_s: float = 0.0
    elapsed_s: float = 0.0
    slippage: float = 0.0
    max_lag: int = 0
    streams: Dict[int, StreamPlan] = field(default_factory=dict)
    fault: Dict[str, int] = field(default_factory=dict)
    notes: str = ""

    @property
    def intended_total(self) -> int:
        return sum(s.intended for s in self.streams.values())

    @property
    def sent_total(self) -> int:
        return sum(s.sent for s in self.streams.values())

    @property
    def stream_ids(self):
        return sorted(self.streams)

    def to_items(self) -> Dict[str, object]:
        items: Dict[str, object] = {
            "run_id": self.run_id,
            "source": self.source,
            "source_kind": self.source_kind,
            "transport": self.transport,
            "endpoint": self.endpoint,
            "workers": self.workers,
            "seed": self.seed,
            "scale": repr(float(self.scale)),
            "start_wall_ns": self.start_wall_ns,
            "end_wall_ns": self.end_wall_ns,
            "completed": self.completed,
            "scheduled_s": repr(float(self.scheduled_s)),
            "elapsed_s": f"{self.elapsed_s:.6f}",
            "slippage": repr(float(self.slippage)),
            "max_lag": self.max_lag,
            "intended_total": self.intended_total,
            "sent_total": self.sent_total,
        }
        if self.notes:
            items["notes"] = self.notes
        for sid in self.stream_ids:
            plan = self.streams[sid]
            items[f"stream.{sid}.intended"] = plan.intended
            items[f"stream.{sid}.sent"] = plan.sent
            items[f"stream.{sid}.priority"] = plan.priority
        for k, v in self.fault.items():
            items[f"fault.{k}"] = v
        return items

    def write(self, path: str | os.PathLike) -> None:
        write_kv(path, self.to_items(), header="wrench run manifest")

    @classmethod
    def read(cls, path: str | os.PathLike) -> "RunManifest":
        kv = read_kv(path)
        m = cls(
            run_id=kv.get("run_id", ""),
            source=kv.get("source", ""),
            source_kind=kv.get("source_kind", "workload"),
            transport=kv.get("transport", ""),
            endpoint=kv.get("endpoint", ""),
            workers=int(kv.get("workers", "1")),
            seed=int(kv.get("seed", "0")),
            scale=float(kv.get("scale", "1")),
            start_wall_ns=int(kv.get("start_wall_ns", "0")),
            end_wall_ns=int(kv.get("end_wall_ns", "0")),
            completed=as_bool(kv.get("completed", "false")),
            scheduled_s=float(kv.get("scheduled_s", "0")),
            elapsed_s=float(kv.get("elapsed_s", "0")),
            slippage=float(kv.get("slippage", "0")),
            max_lag=int(kv.get("max_lag", "0")),
            notes=kv.get("notes", ""),
        )
        for key, value in kv.items():
            if key.startswith("stream."):
                _, sid, attr = key.split(".", 2)
                plan = m.streams.setdefault(int(sid), StreamPlan(0))
                setattr(plan, attr, int(value))
            elif key.startswith("fault."):
                m.fault[key[len("fault."):]] = int(value)
        return m


def manifest_path_for(log_path: str | os.PathLike) -> str:
    """Conventional manifest location next to a latency log."""
    root, _ = os.path.splitext(os.fspath(log_path))
    return root + ".manifest"


def read_manifest(path: str | os.PathLike) -> Optional[RunManifest]:
    return RunManifest.read(path) if os.path.exists(path) else None
