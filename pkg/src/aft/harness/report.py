"""CSV rows and a one-line human summary per run."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, fields

from .anomalies import AnomalyCounts
from .workload import Metrics, WorkloadSpec


@dataclass(frozen=True)
class ReportRow:
    mode: str
    clients: int
    hops: int
    zipf: float
    throughput_tps: float
    p50_ms: float
    p99_ms: float
    ryw: int
    fr: int
    retries: int


COLUMNS = [f.name for f in fields(ReportRow)]


def report(spec: WorkloadSpec, metrics: Metrics, anomalies: AnomalyCounts) -> ReportRow:
    return ReportRow(spec.mode, spec.num_clients, spec.hops, spec.zipf,
                     round(metrics.throughput_tps, 2), round(metrics.p50_ms, 3),
                     round(metrics.p99_ms, 3), anomalies.ryw, anomalies.fr, metrics.retries)


def write_csv(path: str, rows: list[ReportRow], append: bool = True) -> None:
    """Write ``rows``; the header goes in only when the file is new or empty."""
    fresh = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "w" if not append else "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        if fresh:
            w.writeheader()
        for row in rows:
            w.writerow(asdict(row))


def read_csv(path: str) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def summary(row: ReportRow) -> str:
    return (f"{row.mode}: {row.clients} clients x {row.hops} hops, zipf {row.zipf} | "
            f"{row.throughput_tps:.1f} txn/s, p50 {row.p50_ms:.2f} ms, "
            f"p99 {row.p99_ms:.2f} ms | RYW {row.ryw}, FR {row.fr}, retries {row.retries}")
