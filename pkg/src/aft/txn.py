"""Transaction manager: the per-node request path.

Commit writes every key version under its own storage key, then the commit
record, and only then makes the versions visible in the local index. Reads
consult only the index, so a version is never visible before its record is
durable.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .cache import DEFAULT_CACHE_BYTES, DataCache
from .core import (
    COMMIT_PREFIX,
    NULL_VERSION,
    CommitRecord,
    NodeUnavailable,
    NotReadable,
    NotRunning,
    PendingTxnHandle,
    StorageError,
    TransactionId,
    UnknownTransaction,
    UuidSource,
    encode_commit_key,
    encode_data_key,
    random_uuid,
    SystemClock,
)
from .fault_manager import GcAck, GcCandidateSet
from .index import CommitIndex, ReadEntry, ReadSet, ReadRegistry, atomic_read
from .replication import is_superseded
from .storage import Backend
from .write_buffer import DEFAULT_SPILL_THRESHOLD, Spilled, TxnStatus, WriteBuffer

log = logging.getLogger(__name__)

DEFAULT_TXN_TIMEOUT = 60.0
DEFAULT_BOOTSTRAP_LIMIT = 10_000

CrashHook = Callable[[str, object], None]


@dataclass
class Session:
    handle: PendingTxnHandle
    read_set: ReadSet = field(default_factory=ReadSet)
    last_active: float = 0.0
    reused_uuid: bool = False
    # Set once a commit attempt may have reached the commit record; retries
    # then rewrite the same keys under the same id.
    attempt: tuple[TransactionId, list[tuple[str, bytes]]] | None = None
    lock: threading.RLock = field(default_factory=threading.RLock)


@dataclass(frozen=True)
class ReadResult:
    value: bytes | None
    tid: TransactionId | None
    own_write: bool = False


def is_atomic_readset(entries: dict[str, ReadEntry]) -> bool:
    for entry in entries.values():
        for other in entry.cowritten:
            seen = entries.get(other)
            if seen is not None and seen.tid < entry.tid:
                return False
    return True


class TransactionManager:
    """One shim node: sessions, write buffers, commit index and data cache."""

    def __init__(self, storage: Backend, node_id: str = "node-0", clock=None,
                 uuid_source: UuidSource = random_uuid,
                 spill_threshold: int = DEFAULT_SPILL_THRESHOLD,
                 txn_timeout: float = DEFAULT_TXN_TIMEOUT,
                 bootstrap_limit: int = DEFAULT_BOOTSTRAP_LIMIT,
                 cache_bytes: int = DEFAULT_CACHE_BYTES,
                 time_fn: Callable[[], float] = time.monotonic,
                 check_reads: bool = False):
        self.storage = storage
        self.node_id = node_id
        self.clock = clock or SystemClock()
        self.uuid_source = uuid_source
        self.txn_timeout = txn_timeout
        self.bootstrap_limit = bootstrap_limit
        self.time_fn = time_fn
        self.check_reads = check_reads
        self.crash_hook: CrashHook | None = None

        self.index = CommitIndex()
        self.registry = ReadRegistry()
        self.cache = DataCache(cache_bytes)
        self.buffer = WriteBuffer(storage, spill_threshold, on_discard=self._enqueue_garbage,
                                  crash_hook=self._hook)
        self.sessions: dict[str, Session] = {}
        self._sessions_lock = threading.Lock()
        self._recent: list[CommitRecord] = []
        self._recent_lock = threading.Lock()
        self._garbage: list[str] = []
        self._garbage_lock = threading.Lock()
        self._ts_lock = threading.Lock()
        self._last_ts = 0
        self._sequence = 0
        self.alive = True
        self.stats = {"commits": 0, "aborts": 0, "reads": 0, "not_readable": 0}

    # -- plumbing ---------------------------------------------------------

    def _hook(self, point: str, arg: object = None) -> None:
        if self.crash_hook is not None:
            self.crash_hook(point, arg)

    def _check_alive(self) -> None:
        if not self.alive:
            raise NodeUnavailable(f"node {self.node_id} is down")

    def _session(self, txid) -> Session:
        self._check_alive()
        uuid = getattr(txid, "uuid", txid)
        s = self.sessions.get(uuid)
        if s is None:
            raise UnknownTransaction(f"unknown transaction {uuid}")
        return s

    def _next_ts(self) -> int:
        with self._ts_lock:
            self._last_ts = max(self.clock.now(), self._last_ts + 1)
            return self._last_ts

    def _enqueue_garbage(self, sks: list[str]) -> None:
        with self._garbage_lock:
            self._garbage.extend(sks)

    def flush_garbage(self) -> int:
        """Delete queued provisional keys; returns how many were deleted."""
        with self._garbage_lock:
            batch, self._garbage = self._garbage, []
        if not batch:
            return 0
        try:
            self.storage.delete_batch(batch)
        except StorageError:
            self._enqueue_garbage(batch)
            raise
        return len(batch)

    def crash(self) -> None:
        """Simulate process death: every piece of in-memory state is lost."""
        self.alive = False
        with self._sessions_lock:
            self.sessions.clear()
        self.buffer = WriteBuffer(self.storage, self.buffer.spill_threshold)
        self.index = CommitIndex()
        self.registry = ReadRegistry()
        self.cache.clear()
        with self._recent_lock:
            self._recent.clear()
        with self._garbage_lock:
            self._garbage.clear()

    # -- transaction API --------------------------------------------------

    def start_transaction(self, uuid: str | None = None) -> PendingTxnHandle:
        """Begin a transaction.

        Passing the uuid of an earlier attempt continues it if its session is
        still live here, and otherwise starts a retry that commits at most once.
        """
        self._check_alive()
        now = self.time_fn()
        with self._sessions_lock:
            if uuid is not None:
                TransactionId(0, uuid)  # validates the format
                existing = self.sessions.get(uuid)
                if existing is not None:
                    existing.last_active = now
                    return existing.handle
            handle = PendingTxnHandle(uuid or self.uuid_source(), now)
            self.sessions[handle.uuid] = Session(handle, last_active=now,
                                                 reused_uuid=uuid is not None)
            self.buffer.open(handle)
        return handle

    def put(self, txid, key: str, value: bytes) -> None:
        s = self._session(txid)
        with s.lock:
            self._check_alive()
            s.last_active = self.time_fn()
            self.buffer.buffer_put(s.handle.uuid, key, value)

    def get(self, txid, key: str) -> bytes | None:
        return self.get_version(txid, key).value

    def get_version(self, txid, key: str) -> ReadResult:
        s = self._session(txid)
        uuid = s.handle.uuid
        with s.lock:
            self._check_alive()
            s.last_active = self.time_fn()
            buf = self.buffer.lookup(uuid)
            if buf.status is not TxnStatus.RUNNING:
                raise NotRunning(f"transaction {uuid} is {buf.status.value}")
            if key in buf.updates or key in buf.spilled:
                return ReadResult(self.buffer.read_own_write(uuid, key), None, True)

            entry = s.read_set.get(key)
            if entry is not None:
                if entry.tid == NULL_VERSION:
                    return ReadResult(None, None)
                return ReadResult(self._fetch(key, entry.tid), entry.tid)

            index = self.index
            with index.lock:
                tid = atomic_read(key, s.read_set, index)
                if tid is not None:
                    s.read_set.add(key, tid, index.records[tid].writeset)
                    self.registry.add(tid, uuid)
                else:
                    known = bool(index.versions.get(key)) or any(
                        key in e.cowritten for e in s.read_set.entries.values())
                    if not known:
                        # A NULL read is a read of the key's initial version:
                        # it must repeat, and later reads must not see a
                        # transaction that wrote this key.
                        s.read_set.add(key, NULL_VERSION, frozenset((key,)))
            self.stats["reads"] += 1
            if tid is None:
                if known:
                    self.stats["not_readable"] += 1
                    raise NotReadable(f"no valid version of {key!r} for {uuid}")
                return ReadResult(None, None)
            if self.check_reads:
                assert is_atomic_readset(s.read_set.entries), "read set lost atomicity"
            return ReadResult(self._fetch(key, tid), tid)

    def _fetch(self, key: str, tid: TransactionId) -> bytes:
        value = self.cache.get(key, tid)
        if value is not None:
            return value
        value = self.storage.get(encode_data_key(key, tid))
        if value is None:
            raise StorageError(f"committed version {key}@{tid.render()} missing from storage")
        self.cache.put(key, tid, value)
        return value

    def commit_transaction(self, txid) -> TransactionId:
        s = self._session(txid)
        uuid = s.handle.uuid
        with s.lock:
            self._check_alive()
            s.last_active = self.time_fn()
            if s.attempt is None:
                if s.reused_uuid:
                    done = self.find_commit(uuid)
                    if done is not None:
                        self._end_session(uuid, committed=True)
                        return done
                drained = self.buffer.drain_for_commit(uuid)
                if not drained:
                    self._end_session(uuid, committed=True)
                    return TransactionId(self._next_ts(), uuid)
                try:
                    entries = self._materialize(drained)
                except StorageError:
                    self.buffer.reopen(uuid)
                    raise
                tid = TransactionId(self._next_ts(), uuid)
            else:
                tid, entries = s.attempt

            self._hook("before_data_write", tid)
            try:
                self.storage.put_batch([(encode_data_key(k, tid), v) for k, v in entries])
            except StorageError:
                if s.attempt is None:
                    self.buffer.reopen(uuid)
                raise
            self._hook("after_data_write", tid)

            rec = CommitRecord(tid, frozenset(k for k, _ in entries))
            s.attempt = (tid, entries)
            self.storage.put(encode_commit_key(tid), rec.encode())
            self._hook("after_commit_record", tid)

            with self.index.lock:
                self.index.insert(rec)
            for k, v in entries:
                self.cache.put(k, tid, v)
            with self._recent_lock:
                self._recent.append(rec)
            self.stats["commits"] += 1
            self._end_session(uuid, committed=True)
        self._hook("after_ack_before_broadcast", tid)
        return tid

    def _materialize(self, drained: list[tuple[str, bytes | Spilled]]) -> list[tuple[str, bytes]]:
        out = []
        for key, v in drained:
            if isinstance(v, Spilled):
                raw = self.storage.get(v.storage_key)
                if raw is None:
                    raise StorageError(f"spilled value for {key!r} missing")
                v = raw
            out.append((key, v))
        return out

    def abort_transaction(self, txid) -> None:
        self._check_alive()
        uuid = getattr(txid, "uuid", txid)
        s = self.sessions.get(uuid)
        if s is None:
            return
        with s.lock:
            if self._end_session(uuid, committed=False):
                self.stats["aborts"] += 1

    def _end_session(self, uuid: str, committed: bool) -> bool:
        with self._sessions_lock:
            s = self.sessions.pop(uuid, None)
        if s is None:
            return False
        if committed:
            self.buffer.finish(uuid)
        else:
            self.buffer.discard(uuid)
        self.registry.release(uuid)
        return True

    def expire_stale_sessions(self, now: float | None = None) -> list[PendingTxnHandle]:
        now = self.time_fn() if now is None else now
        with self._sessions_lock:
            stale = [s for s in self.sessions.values()
                     if now - s.last_active > self.txn_timeout]
        for s in stale:
            self.abort_transaction(s.handle.uuid)
        return [s.handle for s in stale]

    def live_uuids(self) -> set[str]:
        self._check_alive()
        with self._sessions_lock:
            return set(self.sessions)

    # -- metadata ---------------------------------------------------------

    def record_committed(self, rec: CommitRecord) -> bool:
        """Index a commit learned from a peer, the fault manager or storage.

        Superseded records are not indexed and count as locally deleted.
        """
        self._check_alive()
        index = self.index
        with index.lock:
            if rec.tid in index.records or rec.tid in index.locally_deleted:
                return False
            if is_superseded(rec, index):
                index.locally_deleted.add(rec.tid)
                return False
            index.insert(rec)
            return True

    def fault_notify(self, records: list[CommitRecord]) -> int:
        return sum(self.record_committed(rec) for rec in records)

    def gc_ack(self, records: list[CommitRecord]) -> list[CommitRecord]:
        """Report which proposed records this node holds no metadata for."""
        self._check_alive()
        index = self.index
        out = []
        with index.lock:
            for rec in records:
                if rec.tid in index.locally_deleted:
                    out.append(rec)
                elif rec.tid not in index.records and is_superseded(rec, index):
                    index.locally_deleted.add(rec.tid)
                    out.append(rec)
        return out

    def gc_candidates(self, cands: GcCandidateSet) -> GcAck:
        acked = self.gc_ack(list(cands.records))
        return GcAck(self.node_id, cands.round, frozenset(r.tid for r in acked))

    def take_recent_commits(self) -> list[CommitRecord]:
        self._check_alive()
        with self._recent_lock:
            out, self._recent = self._recent, []
        return out

    def next_sequence(self) -> int:
        self._sequence += 1
        return self._sequence

    def find_commit(self, uuid: str) -> TransactionId | None:
        """Id under which ``uuid`` committed, consulting storage if needed."""
        with self.index.lock:
            tid = self.index.by_uuid.get(uuid)
        if tid is not None:
            return tid
        suffix = "-" + uuid
        for sk in self.storage.list_prefix(COMMIT_PREFIX, reverse=True):
            if sk.endswith(suffix):
                return TransactionId.parse(sk[len(COMMIT_PREFIX):])
        return None

    def bootstrap(self) -> int:
        """Warm the index from the newest commit records in storage."""
        loaded = 0
        for sk in self.storage.list_prefix(COMMIT_PREFIX, limit=self.bootstrap_limit,
                                           reverse=True):
            raw = self.storage.get(sk)
            if raw is None:
                continue
            rec = CommitRecord.decode(raw)
            if self.record_committed(rec):
                loaded += 1
            with self._ts_lock:
                self._last_ts = max(self._last_ts, rec.tid.timestamp)
        return loaded

    def describe(self) -> dict:
        with self.index.lock:
            return {
                "node_id": self.node_id,
                "records": len(self.index.records),
                "keys": len(self.index.versions),
                "locally_deleted": len(self.index.locally_deleted),
                "sessions": len(self.sessions),
                "cache_entries": len(self.cache),
                **self.stats,
            }
