"""Shared fixtures and builders for the test modules."""

from aft.core import CommitRecord, LogicalClock, SeededUuids, TransactionId
from aft.index import CommitIndex
from aft.storage import MemoryBackend
from aft.txn import TransactionManager


def uid(n: int) -> str:
    return f"{n:032x}"


def tid(ts: int, n: int = 0) -> TransactionId:
    return TransactionId(ts, uid(n))


def rec(ts: int, *keys: str, n: int = 0) -> CommitRecord:
    return CommitRecord(tid(ts, n), frozenset(keys))


def index_of(*records: CommitRecord) -> CommitIndex:
    idx = CommitIndex()
    for r in records:
        idx.insert(r)
    return idx


def manager(storage=None, node_id="n0", seed=1, **kw) -> TransactionManager:
    return TransactionManager(storage if storage is not None else MemoryBackend(), node_id,
                              clock=LogicalClock(), uuid_source=SeededUuids(seed), **kw)


def commit(m: TransactionManager, writes: dict[str, bytes]) -> TransactionId:
    h = m.start_transaction()
    for k, v in writes.items():
        m.put(h, k, v)
    return m.commit_transaction(h)
