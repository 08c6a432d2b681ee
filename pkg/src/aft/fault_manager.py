"""Garbage collection and commit recovery.

Nodes drop superseded commit metadata locally. The coordinator, which also
acts as the fault manager, deletes a transaction's data and commit record
once every node reports having dropped its metadata, rescans the commit set
for records it never heard about, and removes orphaned provisional data.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Protocol

from .core import (
    COMMIT_PREFIX,
    DATA_PREFIX,
    AftError,
    CommitRecord,
    StorageError,
    TransactionId,
    decode_commit_key,
    decode_data_key,
    encode_commit_key,
    encode_data_key,
    is_provisional,
)
from .index import CommitIndex
from .storage import Backend

log = logging.getLogger(__name__)

DEFAULT_GC_INTERVAL = 5.0
DEFAULT_FAULT_SCAN_INTERVAL = 5.0


def local_gc_sweep(node) -> list[TransactionId]:
    """Drop superseded records that no running transaction has read from."""
    index = node.index
    removed = []
    with index.lock:
        for rec in index.superseded():
            if node.registry.has_readers(rec.tid):
                continue
            index.remove(rec.tid)
            index.locally_deleted.add(rec.tid)
            node.cache.evict(rec.tid, rec.writeset)
            removed.append(rec.tid)
    return removed


@dataclass(frozen=True)
class GcCandidateSet:
    """One round's proposal. On the wire each candidate is ``[tid, write set]``
    with the tid in its rendered ``ts-uuid`` form, which keeps the message
    compact; a node that never indexed a candidate needs the write set to
    judge it."""

    round: int
    records: tuple[CommitRecord, ...]

    @property
    def tids(self) -> list[TransactionId]:
        return [r.tid for r in self.records]

    @cached_property
    def _wire(self) -> list:
        return [[r.tid.render(), sorted(r.writeset)] for r in self.records]

    def to_message(self) -> dict:
        # Built once per round and shared by every node's request.
        return {"type": "gc_candidates", "round": self.round, "tids": self._wire}

    @classmethod
    def from_message(cls, msg: dict) -> "GcCandidateSet":
        return cls(int(msg["round"]), tuple(
            CommitRecord(TransactionId.parse(t), frozenset(ws)) for t, ws in msg["tids"]))


@dataclass(frozen=True)
class GcAck:
    """A node's answer. On the wire the acknowledged ids are positions in the
    round's candidate list, so nothing has to be rendered or parsed."""

    node: str
    round: int
    deleted: frozenset[TransactionId]

    def to_message(self, cands: GcCandidateSet) -> dict:
        return {"type": "gc_ack", "node": self.node, "round": self.round,
                "deleted": [i for i, r in enumerate(cands.records) if r.tid in self.deleted]}

    @classmethod
    def from_message(cls, msg: dict, cands: GcCandidateSet) -> "GcAck":
        return cls(str(msg.get("node", "")), int(msg["round"]),
                   frozenset(cands.records[int(i)].tid for i in msg["deleted"]))


class NodeHandle(Protocol):
    """What the coordinator needs from a node, local or remote."""

    node_id: str

    def gc_candidates(self, cands: "GcCandidateSet") -> "GcAck": ...

    def fault_notify(self, records: list[CommitRecord]) -> int: ...

    def live_uuids(self) -> set[str]: ...


@dataclass
class CoordinatorStats:
    rounds: int = 0
    deleted: int = 0
    recovered: int = 0
    orphans_deleted: int = 0
    scans: int = 0


class Coordinator:
    """Fault manager and global garbage collector in one process."""

    def __init__(self, storage: Backend, nodes: Iterable[NodeHandle] = (),
                 deletion_workers: int = 1, orphan_age: float = 600.0,
                 max_candidates: int = 10_000,
                 time_fn: Callable[[], float] = time.monotonic):
        self.storage = storage
        self.nodes: list[NodeHandle] = list(nodes)
        self.orphan_age = orphan_age
        self.max_candidates = max_candidates
        self.time_fn = time_fn
        self.index = CommitIndex()
        self.globally_deleted: set[TransactionId] = set()
        self._deferred: set[TransactionId] = set()
        self._first_seen: dict[str, float] = {}
        self._round = 0
        self._lock = threading.RLock()
        self._pool = ThreadPoolExecutor(max_workers=max(1, deletion_workers),
                                        thread_name_prefix="aft-gc-delete")
        self._pending: list[Future] = []
        self._failed: list[CommitRecord] = []
        self.stats = CoordinatorStats()

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    # -- commit ledger ------------------------------------------------------

    def receive_commits(self, records: Iterable[CommitRecord]) -> None:
        """Unpruned commit feed from the nodes."""
        with self._lock:
            for rec in records:
                if rec.tid not in self.globally_deleted:
                    self.index.insert(rec)

    def knows(self, tid: TransactionId) -> bool:
        with self._lock:
            return tid in self.index.records or tid in self.globally_deleted

    # -- fault scan ---------------------------------------------------------

    def fault_scan(self) -> list[CommitRecord]:
        """Recover persisted commit records that never arrived by broadcast.

        Recovered records are indexed here, pushed to every reachable node
        and held back from the next GC round.
        """
        keys = self.storage.list_prefix(COMMIT_PREFIX)
        self.stats.scans += 1
        recovered = []
        for sk in keys:
            tid = decode_commit_key(sk)
            if self.knows(tid):
                continue
            raw = self.storage.get(sk)
            if raw is None:
                continue
            rec = CommitRecord.decode(raw)
            with self._lock:
                self.index.insert(rec)
                self._deferred.add(rec.tid)
            recovered.append(rec)
        if recovered:
            self.stats.recovered += len(recovered)
            self.notify(recovered)
        return recovered

    def notify(self, records: list[CommitRecord]) -> None:
        for node in self.nodes:
            try:
                node.fault_notify(records)
            except (AftError, OSError) as e:
                log.info("fault notify to %s failed: %s", getattr(node, "node_id", node), e)

    # -- global GC ----------------------------------------------------------

    def candidates(self) -> GcCandidateSet:
        with self._lock:
            self._round += 1
            deferred, self._deferred = self._deferred, set()
            picked = []
            for rec in self.index.superseded():
                if rec.tid in deferred:
                    continue
                picked.append(rec)
                if len(picked) >= self.max_candidates:
                    break
            return GcCandidateSet(self._round, tuple(picked))

    def collect_acks(self, cands: GcCandidateSet) -> list[GcAck]:
        acks = []
        for node in self.nodes:
            try:
                acks.append(node.gc_candidates(cands))
            except (AftError, OSError, LookupError, ValueError) as e:
                log.info("no gc ack from %s: %s", getattr(node, "node_id", node), e)
        return acks

    def global_gc_round(self, wait_for_deletes: bool = False) -> list[TransactionId]:
        """Run one round; returns the ids whose data was scheduled for deletion."""
        with self._lock:
            retry, self._failed = self._failed, []
        if retry:
            self._pending.append(self._pool.submit(self._delete, retry))
        cands = self.candidates()
        if not cands.records:
            return []
        acks = self.collect_acks(cands)
        return self.apply_acks(cands, acks, expected=len(self.nodes),
                               wait_for_deletes=wait_for_deletes)

    def apply_acks(self, cands: GcCandidateSet, acks: list[GcAck], expected: int,
                   wait_for_deletes: bool = False) -> list[TransactionId]:
        acks = [a for a in acks if a.round == cands.round]
        if len({a.node for a in acks}) < expected:
            return []
        deletable = [r for r in cands.records if all(r.tid in a.deleted for a in acks)]
        if not deletable:
            return []
        with self._lock:
            for rec in deletable:
                self.index.remove(rec.tid)
                self.globally_deleted.add(rec.tid)
        fut = self._pool.submit(self._delete, deletable)
        self._pending = [f for f in self._pending if not f.done()] + [fut]
        if wait_for_deletes:
            fut.result()
        self.stats.rounds += 1
        self.stats.deleted += len(deletable)
        return [r.tid for r in deletable]

    def _delete(self, records: list[CommitRecord]) -> None:
        data = [encode_data_key(k, r.tid) for r in records for k in sorted(r.writeset)]
        for attempt in range(3):
            try:
                self.storage.delete_batch(data)
                self.storage.delete_batch([encode_commit_key(r.tid) for r in records])
                return
            except StorageError as e:
                log.warning("gc delete failed (attempt %d): %s", attempt + 1, e)
        with self._lock:
            self._failed.extend(records)

    def drain(self) -> None:
        wait(self._pending)
        self._pending = []

    def live_commit_records(self) -> int:
        return len(self.storage.list_prefix(COMMIT_PREFIX))

    # -- orphans ------------------------------------------------------------

    def orphan_sweep(self, now: float | None = None) -> list[str]:
        """Delete data no commit will ever reference.

        Provisional spill keys whose transaction has no live session, and
        versions whose commit record was never written, are removed once they
        have been seen for ``orphan_age`` seconds.
        """
        now = self.time_fn() if now is None else now
        live: set[str] = set()
        for node in self.nodes:
            try:
                live |= node.live_uuids()
            except (AftError, OSError):
                continue
        seen_now = set()
        doomed = []
        for sk in self.storage.list_prefix(DATA_PREFIX):
            try:
                _, tid = decode_data_key(sk)
            except ValueError:
                continue
            if is_provisional(tid):
                if tid.uuid in live:
                    continue
            else:
                if self.knows(tid):
                    continue
                if self.storage.get(encode_commit_key(tid)) is not None:
                    continue
            seen_now.add(sk)
            first = self._first_seen.setdefault(sk, now)
            if now - first >= self.orphan_age:
                doomed.append(sk)
        self._first_seen = {sk: t for sk, t in self._first_seen.items()
                            if sk in seen_now and sk not in doomed}
        if doomed:
            self.storage.delete_batch(doomed)
            self.stats.orphans_deleted += len(doomed)
        return doomed
