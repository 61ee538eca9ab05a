"""Run metrics: per-device compute times, transfer volumes, imbalance.

Emitted as line-delimited JSON records with a stable schema so external
tooling can plot or regress on them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class ModeMetrics:
    mode: int
    device_compute_seconds: list[float]
    device_nnz: list[int]
    device_shards: list[int]
    staging_bytes: int = 0
    staging_seconds: float = 0.0
    allgather_bytes: int = 0
    allgather_seconds: float = 0.0
    barrier_count: int = 0
    wall_seconds: float = 0.0


@dataclass
class RunMetrics:
    devices: int
    modes: list[ModeMetrics] = field(default_factory=list)
    preprocessing_seconds: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def device_compute_totals(self) -> list[float]:
        totals = [0.0] * self.devices
        for m in self.modes:
            for j, t in enumerate(m.device_compute_seconds):
                totals[j] += t
        return totals

    @property
    def compute_seconds(self) -> float:
        """Critical-path compute: per-mode max over devices, summed."""
        return sum(max(m.device_compute_seconds, default=0.0) for m in self.modes)

    @property
    def imbalance_pct(self) -> float:
        totals = self.device_compute_totals
        total = sum(totals)
        if total <= 0:
            return 0.0
        return (max(totals) - min(totals)) / total * 100.0

    @property
    def staging_bytes(self) -> int:
        return sum(m.staging_bytes for m in self.modes)

    @property
    def allgather_bytes(self) -> int:
        return sum(m.allgather_bytes for m in self.modes)

    @property
    def nnz_processed(self) -> int:
        return sum(sum(m.device_nnz) for m in self.modes)


def run_records(metrics: RunMetrics, platform=None, tensor=None) -> list[dict]:
    """Flatten a run into schema-stable JSON-able records."""
    recs: list[dict] = []
    if platform is not None:
        recs.append(
            {
                "record": "platform",
                "devices": platform.devices,
                "workers": platform.workers_per_device,
                "column_width": platform.column_width,
                "rank": platform.rank,
                "accumulation": platform.accumulation,
                "scheduling": platform.scheduling,
            }
        )
    if tensor is not None:
        recs.append(
            {
                "record": "tensor",
                "name": tensor.name,
                "shape": list(tensor.shape),
                "nnz": tensor.nnz,
            }
        )
    for d, t in enumerate(metrics.preprocessing_seconds):
        recs.append({"record": "preprocessing", "mode": d, "seconds": t})
    for m in metrics.modes:
        for j, t in enumerate(m.device_compute_seconds):
            recs.append(
                {
                    "record": "device_compute",
                    "mode": m.mode,
                    "device": j,
                    "seconds": t,
                    "nnz": m.device_nnz[j],
                    "shards": m.device_shards[j],
                }
            )
        recs.append(
            {
                "record": "mode_summary",
                "mode": m.mode,
                "compute_seconds": max(m.device_compute_seconds, default=0.0),
                "staging_bytes": m.staging_bytes,
                "staging_seconds": m.staging_seconds,
                "allgather_bytes": m.allgather_bytes,
                "allgather_seconds": m.allgather_seconds,
                "barriers": m.barrier_count,
                "wall_seconds": m.wall_seconds,
            }
        )
    totals = metrics.device_compute_totals
    recs.append(
        {
            "record": "imbalance",
            "imbalance_pct": metrics.imbalance_pct,
            "max_seconds": max(totals, default=0.0),
            "min_seconds": min(totals, default=0.0),
            "total_seconds": sum(totals),
        }
    )
    recs.append(
        {
            "record": "totals",
            "wall_seconds": metrics.wall_seconds,
            "compute_seconds": metrics.compute_seconds,
            "staging_bytes": metrics.staging_bytes,
            "allgather_bytes": metrics.allgather_bytes,
            "preprocessing_seconds": sum(metrics.preprocessing_seconds),
        }
    )
    return recs


def write_records(records: list[dict], stream):
    for rec in records:
        stream.write(json.dumps(rec) + "\n")
