import pytest

from aft.cache import DataCache
from aft.core import (
    COMMIT_PREFIX,
    NotReadable,
    NotRunning,
    SimulatedCrash,
    StorageError,
    UnknownTransaction,
    encode_data_key,
)
from aft.fault_manager import local_gc_sweep
from aft.index import ReadEntry, ReadSet, atomic_read
from aft.storage import MemoryBackend
from aft.txn import is_atomic_readset
from helpers import commit, index_of, manager, rec, tid


# -- atomic_read over fixture F1: T1 wrote {l}, T2 wrote {k, l} -----------------

F1 = index_of(rec(1, "l", n=1), rec(2, "k", "l", n=2))


def test_f1_first_read_gets_newest():
    assert atomic_read("k", ReadSet(), F1) == tid(2, 2)


def test_f1_cowritten_forces_new_enough_version():
    rs = {"k": ReadEntry(tid(2, 2), frozenset({"k", "l"}))}
    assert atomic_read("l", rs, F1) == tid(2, 2)


def test_f1_no_valid_version():
    rs = {"l": ReadEntry(tid(1, 1), frozenset({"l"}))}
    assert atomic_read("k", rs, F1) is None


def test_never_written_key_is_null():
    assert atomic_read("x", ReadSet(), F1) is None


def test_older_valid_version_is_chosen():
    idx = index_of(rec(1, "k", "l", n=1), rec(2, "k", "l", n=2), rec(3, "k", n=3))
    rs = {"l": ReadEntry(tid(1, 1), frozenset({"k", "l"}))}
    # k3 is fine on its own, but k2 was cowritten with l and is newer than l1
    assert atomic_read("k", rs, idx) == tid(3, 3)
    rs = {"l": ReadEntry(tid(2, 2), frozenset({"k", "l"}))}
    assert atomic_read("k", rs, idx) == tid(3, 3)


def test_index_consistency_after_insert_and_remove():
    idx = index_of(rec(3, "a", "b", n=1), rec(1, "a", n=2), rec(2, "b", n=3))
    idx.check()
    assert idx.versions["a"] == [tid(1, 2), tid(3, 1)]
    idx.remove(tid(3, 1))
    idx.check()
    assert idx.versions == {"a": [tid(1, 2)], "b": [tid(2, 3)]}


# -- session API -------------------------------------------------------------


def test_distinct_uuids():
    m = manager()
    uuids = {m.start_transaction().uuid for _ in range(10_000)}
    assert len(uuids) == 10_000


def test_handle_accepted():
    m = manager()
    h = m.start_transaction()
    m.put(h, "k", b"v")
    assert m.get(h, "k") == b"v"


def test_f1_reads_through_manager():
    m = manager()
    commit(m, {"l": b"l1"})
    commit(m, {"k": b"k2", "l": b"l2"})
    h = m.start_transaction()
    assert m.get(h, "k") == b"k2"
    assert m.get(h, "l") == b"l2"


def test_read_your_writes():
    m = manager()
    commit(m, {"k": b"old"})
    h = m.start_transaction()
    assert m.get(h, "k") == b"old"
    m.put(h, "k", b"mine")
    r = m.get_version(h, "k")
    assert r.value == b"mine" and r.own_write


def test_repeatable_read_despite_newer_commit():
    m = manager()
    commit(m, {"k": b"v1"})
    h = m.start_transaction()
    first = m.get_version(h, "k")
    commit(m, {"k": b"v2"})
    second = m.get_version(h, "k")
    assert (first.tid, first.value) == (second.tid, second.value)


def test_not_readable_when_only_fractured_versions_exist():
    m = manager()
    commit(m, {"l": b"l1"})
    h = m.start_transaction()
    assert m.get(h, "l") == b"l1"
    commit(m, {"k": b"k2", "l": b"l2"})
    with pytest.raises(NotReadable):
        m.get(h, "k")


def test_null_read_of_unwritten_key():
    m = manager()
    h = m.start_transaction()
    r = m.get_version(h, "nothing")
    assert r.value is None and r.tid is None


def test_commit_makes_value_visible():
    m = manager()
    t = commit(m, {"k": b"v"})
    h = m.start_transaction()
    assert m.get_version(h, "k").tid == t
    assert m.storage.get(encode_data_key("k", t)) == b"v"


def test_read_only_commit_persists_nothing():
    m = manager()
    h = m.start_transaction()
    m.get(h, "k")
    m.commit_transaction(h)
    assert m.storage.list_prefix("") == []


def test_own_commits_strictly_increase():
    m = manager()
    tids = [commit(m, {"k": bytes([i])}) for i in range(20)]
    assert tids == sorted(tids) and len({t.timestamp for t in tids}) == 20


def test_crash_before_commit_record_hides_versions_and_retry_commits_once():
    storage = MemoryBackend()
    a, b = manager(storage, "a", seed=1), manager(storage, "b", seed=2)

    def hook(point, arg):
        if point == "after_data_write":
            a.crash()
            raise SimulatedCrash(point)

    a.crash_hook = hook
    h = a.start_transaction()
    a.put(h, "k", b"v")
    with pytest.raises(SimulatedCrash):
        a.commit_transaction(h)
    assert storage.list_prefix(COMMIT_PREFIX) == []
    b.bootstrap()
    r = b.start_transaction()
    assert b.get(r, "k") is None

    h2 = b.start_transaction(h.uuid)
    b.put(h2, "k", b"v")
    t = b.commit_transaction(h2)
    h3 = b.start_transaction(h.uuid)
    assert b.commit_transaction(h3) == t
    assert [k for k in storage.list_prefix(COMMIT_PREFIX) if k.endswith(h.uuid)] == [
        COMMIT_PREFIX + t.render()]


def test_crash_after_commit_record_recovered_by_bootstrap():
    storage = MemoryBackend()
    a = manager(storage, "a")

    def hook(point, arg):
        if point == "after_commit_record":
            a.crash()
            raise SimulatedCrash(point)

    a.crash_hook = hook
    h = a.start_transaction()
    a.put(h, "k", b"v")
    with pytest.raises(SimulatedCrash):
        a.commit_transaction(h)
    b = manager(storage, "b", seed=2)
    assert b.bootstrap() == 1
    r = b.start_transaction()
    assert b.get(r, "k") == b"v"
    # the client's retry is told the transaction already committed
    h2 = b.start_transaction(h.uuid)
    b.put(h2, "k", b"v")
    assert b.commit_transaction(h2).uuid == h.uuid
    assert len(storage.list_prefix(COMMIT_PREFIX)) == 1


def test_storage_failure_on_commit_then_retry_succeeds():
    m = manager()
    h = m.start_transaction()
    m.put(h, "k", b"v")
    m.storage.faults.fail_nth(1)
    with pytest.raises(StorageError):
        m.commit_transaction(h)
    t = m.commit_transaction(h)
    r = m.start_transaction()
    assert m.get_version(r, "k").tid == t


def test_commit_record_failure_retry_reuses_tid():
    m = manager()
    h = m.start_transaction()
    m.put(h, "k", b"v")
    m.storage.faults.fail_nth(2)  # put_batch succeeds, commit record write fails
    with pytest.raises(StorageError):
        m.commit_transaction(h)
    written = m.storage.list_prefix("data/")
    t = m.commit_transaction(h)
    assert written == [encode_data_key("k", t)]
    assert len(m.storage.list_prefix(COMMIT_PREFIX)) == 1


def test_abort_then_get_is_unknown():
    m = manager()
    h = m.start_transaction()
    m.put(h, "k", b"v")
    m.abort_transaction(h)
    with pytest.raises(UnknownTransaction):
        m.get(h, "k")
    m.abort_transaction(h)
    assert m.storage.list_prefix("data/") == []


def test_abort_after_spill_leaves_only_pending_garbage():
    m = manager(spill_threshold=8)
    h = m.start_transaction()
    m.put(h, "k", b"x" * 16)
    m.abort_transaction(h)
    assert all(k.split("/")[2].startswith("0" * 20) for k in m.storage.list_prefix("data/"))
    m.flush_garbage()
    assert m.storage.list_prefix("data/") == []


def test_transaction_affinity():
    storage = MemoryBackend()
    a, b = manager(storage, "a"), manager(storage, "b", seed=2)
    h = a.start_transaction()
    with pytest.raises(UnknownTransaction):
        b.put(h, "k", b"v")


def test_operations_after_commit_fail():
    m = manager()
    h = m.start_transaction()
    m.commit_transaction(h)
    with pytest.raises(UnknownTransaction):
        m.put(h, "k", b"v")


def test_get_while_committing_is_not_running():
    m = manager()
    h = m.start_transaction()
    m.put(h, "k", b"v")
    m.buffer.drain_for_commit(h.uuid)
    with pytest.raises(NotRunning):
        m.get(h, "x")


class Clock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def test_expire_idle_sessions():
    clock = Clock()
    m = manager(txn_timeout=10, time_fn=clock)
    idle = m.start_transaction()
    clock.now = 15
    busy = m.start_transaction()
    clock.now = 20.5
    expired = m.expire_stale_sessions()
    assert [h.uuid for h in expired] == [idle.uuid]
    clock.now = 24
    assert m.expire_stale_sessions() == []
    m.put(busy, "k", b"v")


def test_expired_reader_releases_gc_hold():
    clock = Clock()
    m = manager(txn_timeout=10, time_fn=clock)
    old = commit(m, {"k": b"1"})
    h = m.start_transaction()
    m.get(h, "k")
    commit(m, {"k": b"2"})
    assert local_gc_sweep(m) == []
    clock.now = 100
    m.expire_stale_sessions()
    assert local_gc_sweep(m) == [old]


def test_record_committed_idempotent_and_consistent():
    m = manager()
    r = rec(7, "k", "l", n=9)
    assert m.record_committed(r)
    assert not m.record_committed(r)
    assert tid(7, 9) in m.index.versions["k"] and tid(7, 9) in m.index.versions["l"]
    m.index.check()


def test_record_committed_skips_superseded():
    m = manager()
    m.record_committed(rec(9, "k", n=2))
    assert not m.record_committed(rec(3, "k", n=1))
    assert tid(3, 1) in m.index.locally_deleted


def test_bootstrap_empty_store():
    m = manager()
    assert m.bootstrap() == 0
    h = m.start_transaction()
    assert m.get(h, "k") is None


def test_bootstrap_indexes_existing_commits():
    storage = MemoryBackend()
    a = manager(storage, "a")
    tids = [commit(a, {"k": bytes([i]), f"x{i}": b"x"}) for i in range(3)]
    b = manager(storage, "b", seed=2)
    assert b.bootstrap() == 3
    h = b.start_transaction()
    assert b.get_version(h, "k").tid == tids[-1]
    # later commits on b are newer than anything it bootstrapped
    assert commit(b, {"k": b"b"}) > tids[-1]


def test_bootstrap_with_missing_data_key_surfaces_storage_error():
    storage = MemoryBackend()
    a = manager(storage, "a")
    t = commit(a, {"k": b"v", "l": b"w"})
    storage.delete_batch([encode_data_key("l", t)])
    b = manager(storage, "b", seed=2)
    assert b.bootstrap() == 1
    h = b.start_transaction()
    assert b.get(h, "k") == b"v"
    with pytest.raises(StorageError):
        b.get(h, "l")


def test_bootstrap_limit():
    storage = MemoryBackend()
    a = manager(storage, "a")
    for i in range(5):
        commit(a, {f"k{i}": b"v"})
    b = manager(storage, "b", seed=2, bootstrap_limit=2)
    assert b.bootstrap() == 2
    assert sorted(b.index.versions) == ["k3", "k4"]


def test_data_cache_lru_by_bytes():
    c = DataCache(capacity_bytes=10)
    c.put("a", tid(1), b"12345")
    c.put("b", tid(1), b"12345")
    assert c.get("a", tid(1)) == b"12345"
    c.put("c", tid(1), b"12345")
    assert c.get("b", tid(1)) is None
    assert c.get("a", tid(1)) == b"12345" and c.get("c", tid(1)) == b"12345"
    c.evict(tid(1), ["a"])
    assert c.get("a", tid(1)) is None


def test_cached_values_match_storage():
    m = manager()
    t = commit(m, {"k": b"value"})
    assert m.cache.get("k", t) == m.storage.get(encode_data_key("k", t))


def test_online_atomicity_check():
    m = manager(check_reads=True)
    commit(m, {"a": b"1", "b": b"1"})
    h = m.start_transaction()
    m.get(h, "a")
    m.get(h, "b")
    assert is_atomic_readset(m.sessions[h.uuid].read_set.entries)


def test_null_read_repeats_after_a_later_commit():
    m = manager()
    h = m.start_transaction()
    assert m.get(h, "k") is None
    commit(m, {"k": b"new"})
    assert m.get(h, "k") is None


def test_null_read_blocks_versions_cowritten_with_that_key():
    m = manager()
    commit(m, {"l": b"l1"})
    h = m.start_transaction()
    assert m.get(h, "k") is None
    commit(m, {"k": b"k2", "l": b"l2"})
    # l2 was written together with k, and this transaction saw k as absent
    assert m.get(h, "l") == b"l1"
