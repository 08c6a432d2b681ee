"""Brute-force restatement of the atomic readset condition."""

from __future__ import annotations

from typing import Iterable, Mapping

from ..core import CommitRecord, TransactionId
from ..index import ReadEntry


def is_atomic(entries: Mapping[str, ReadEntry]) -> bool:
    """Check every ordered pair: a version cowritten with key j forces R[j] to be no older."""
    for i, ei in entries.items():
        for j, ej in entries.items():
            if i != j and j in ei.cowritten and ej.tid < ei.tid:
                return False
    return True


def oracle_atomic_read(key: str, read_set: Mapping[str, ReadEntry],
                       history: Iterable[CommitRecord]) -> TransactionId | None:
    """Newest committed version of ``key`` whose addition keeps the set atomic."""
    best = None
    for rec in history:
        if key not in rec.writeset:
            continue
        trial = dict(read_set)
        trial[key] = ReadEntry(rec.tid, rec.writeset)
        if is_atomic(trial) and (best is None or rec.tid > best):
            best = rec.tid
    return best
