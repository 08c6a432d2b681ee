"""Commit index and the atomic read rule.

The index caches committed transactions' write sets and keeps, per key, the
ascending list of transaction ids that wrote it. ``atomic_read`` picks the
version a transaction may read given what it has read so far.
"""

from __future__ import annotations

import bisect
import threading
from dataclasses import dataclass, field
from typing import Iterator, Mapping

from .core import CommitRecord, TransactionId


class CommitIndex:
    """Committed records plus a key -> sorted tids index.

    ``lock`` is held by callers for multi-step operations; single methods are
    not individually synchronised.
    """

    def __init__(self):
        self.records: dict[TransactionId, CommitRecord] = {}
        self.versions: dict[str, list[TransactionId]] = {}
        self.locally_deleted: set[TransactionId] = set()
        self.by_uuid: dict[str, TransactionId] = {}
        # Records that may have become superseded since they were last looked
        # at: whenever a key gains a newer version, the version it displaced
        # goes in here. Sweeps then only look at these instead of everything.
        self.maybe_superseded: set[TransactionId] = set()
        self.lock = threading.RLock()

    def __contains__(self, tid: TransactionId) -> bool:
        return tid in self.records

    def __len__(self) -> int:
        return len(self.records)

    def latest(self, key: str) -> TransactionId | None:
        vs = self.versions.get(key)
        return vs[-1] if vs else None

    def writeset(self, tid: TransactionId) -> frozenset[str]:
        return self.records[tid].writeset

    def insert(self, rec: CommitRecord) -> bool:
        if rec.tid in self.records:
            return False
        self.records[rec.tid] = rec
        self.by_uuid[rec.tid.uuid] = rec.tid
        for key in rec.writeset:
            vs = self.versions.setdefault(key, [])
            if not vs or vs[-1] < rec.tid:
                if vs:
                    self.maybe_superseded.add(vs[-1])
                vs.append(rec.tid)
            else:
                bisect.insort(vs, rec.tid)
                self.maybe_superseded.add(rec.tid)
        return True

    def remove(self, tid: TransactionId) -> CommitRecord | None:
        rec = self.records.pop(tid, None)
        if rec is None:
            return None
        self.maybe_superseded.discard(tid)
        if self.by_uuid.get(tid.uuid) == tid:
            del self.by_uuid[tid.uuid]
        for key in rec.writeset:
            vs = self.versions.get(key)
            if not vs:
                continue
            i = bisect.bisect_left(vs, tid)
            if i < len(vs) and vs[i] == tid:
                del vs[i]
            if not vs:
                del self.versions[key]
        return rec

    def oldest_first(self) -> list[CommitRecord]:
        return [self.records[t] for t in sorted(self.records)]

    def superseded(self) -> list[CommitRecord]:
        """Indexed records that are superseded now, oldest first.

        Records found not to be superseded leave the hint set; one of their
        keys gaining a newer version puts them back.
        """
        out = []
        for tid in sorted(self.maybe_superseded):
            rec = self.records.get(tid)
            if rec is None:
                self.maybe_superseded.discard(tid)
                continue
            if all(self.versions[k][-1] > tid for k in rec.writeset):
                out.append(rec)
            else:
                self.maybe_superseded.discard(tid)
        return out

    def check(self) -> None:
        """Assert index consistency; used by tests."""
        for key, vs in self.versions.items():
            assert vs == sorted(set(vs)), f"unsorted or duplicate versions for {key}"
            for t in vs:
                assert key in self.records[t].writeset
        for tid, rec in self.records.items():
            for key in rec.writeset:
                assert tid in self.versions.get(key, ())
            if all(self.versions[k][-1] > tid for k in rec.writeset):
                assert tid in self.maybe_superseded, f"superseded {tid} missing from hints"


@dataclass(frozen=True)
class ReadEntry:
    tid: TransactionId
    cowritten: frozenset[str]


@dataclass
class ReadSet:
    """The versions a transaction has read, at most one per key."""

    entries: dict[str, ReadEntry] = field(default_factory=dict)

    def add(self, key: str, tid: TransactionId, cowritten: frozenset[str]) -> None:
        self.entries[key] = ReadEntry(tid, cowritten)

    def get(self, key: str) -> ReadEntry | None:
        return self.entries.get(key)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def items(self):
        return self.entries.items()

    def tids(self) -> set[TransactionId]:
        return {e.tid for e in self.entries.values()}


def atomic_read(key: str, read_set: ReadSet | Mapping[str, ReadEntry],
                index: CommitIndex) -> TransactionId | None:
    """Newest version of ``key`` that keeps ``read_set`` an atomic readset.

    Two constraints apply. A version already read that was cowritten with
    ``key`` sets a lower bound. A candidate is rejected if it was cowritten
    with some key whose version in the read set is older than the candidate.
    None means either no version exists or none is valid.
    """
    entries = read_set.entries if isinstance(read_set, ReadSet) else read_set
    lower: TransactionId | None = None
    for entry in entries.values():
        if key in entry.cowritten and (lower is None or entry.tid > lower):
            lower = entry.tid

    versions = index.versions.get(key, ())
    if not versions and lower is None:
        return None
    start = 0 if lower is None else bisect.bisect_left(versions, lower)

    for i in range(len(versions) - 1, start - 1, -1):
        t = versions[i]
        valid = True
        for other in index.records[t].writeset:
            seen = entries.get(other)
            if seen is not None and seen.tid < t:
                valid = False
                break
        if valid:
            return t
    return None


class ReadRegistry:
    """Which running transactions have read from which committed transactions."""

    def __init__(self):
        self._readers: dict[TransactionId, set[str]] = {}
        self._sources: dict[str, set[TransactionId]] = {}
        self._lock = threading.Lock()

    def add(self, source: TransactionId, reader: str) -> None:
        with self._lock:
            self._readers.setdefault(source, set()).add(reader)
            self._sources.setdefault(reader, set()).add(source)

    def release(self, reader: str) -> None:
        with self._lock:
            for src in self._sources.pop(reader, ()):
                readers = self._readers.get(src)
                if readers is not None:
                    readers.discard(reader)
                    if not readers:
                        del self._readers[src]

    def has_readers(self, source: TransactionId) -> bool:
        with self._lock:
            return source in self._readers

    def sources(self) -> set[TransactionId]:
        with self._lock:
            return set(self._readers)
