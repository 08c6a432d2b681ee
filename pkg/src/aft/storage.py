"""Key-value backends.

The shim only assumes that acknowledged writes are durable. Two backends
ship here: an in-memory one with deterministic fault and latency injection
for tests, and a durable one built on an append-only log.

Durable layout under ``root_path``::

    log.bin        append-only records
    <ns>.seg       compacted snapshot of one namespace (same record format)
    GENERATION     bumped on every compaction
    LOCK           flock target serialising processes

Record format: 4-byte big-endian length of the rest of the record, 1-byte op
(0 = put, 1 = delete), 2-byte big-endian key length, key bytes, value bytes,
then a CRC32 (big-endian) over op through value.
"""

from __future__ import annotations

import bisect
import fcntl
import logging
import os
import random
import struct
import threading
import time
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .core import StorageError

log = logging.getLogger(__name__)

OP_PUT = 0
OP_DELETE = 1
_LEN = struct.Struct(">I")
_HDR = struct.Struct(">BH")
_CRC = struct.Struct(">I")


@dataclass
class BackendConfig:
    kind: str = "memory"  # "memory" | "file"
    root_path: str | None = None
    latency_min_ms: float = 0.0
    latency_max_ms: float = 0.0
    # Only honoured when the backend is built in harness mode.
    harness: bool = False
    fsync: bool = True
    seed: int | None = None


class Backend(ABC):
    @abstractmethod
    def get(self, sk: str) -> bytes | None: ...

    @abstractmethod
    def put_batch(self, entries: list[tuple[str, bytes]]) -> None: ...

    @abstractmethod
    def list_prefix(self, prefix: str, limit: int | None = None,
                    reverse: bool = False) -> list[str]: ...

    @abstractmethod
    def delete_batch(self, sks: Iterable[str]) -> None: ...

    def put(self, sk: str, value: bytes) -> None:
        self.put_batch([(sk, value)])

    def close(self) -> None:
        pass


class _SortedKeys:
    """Dict plus a sorted key list for ordered prefix listing."""

    def __init__(self):
        self.data: dict[str, bytes] = {}
        self.keys: list[str] = []

    def put(self, sk: str, value: bytes) -> None:
        if sk not in self.data:
            bisect.insort(self.keys, sk)
        self.data[sk] = value

    def delete(self, sk: str) -> None:
        if self.data.pop(sk, None) is not None:
            i = bisect.bisect_left(self.keys, sk)
            del self.keys[i]

    def list_prefix(self, prefix: str, limit: int | None, reverse: bool) -> list[str]:
        if limit is not None and limit <= 0:
            return []
        lo = bisect.bisect_left(self.keys, prefix)
        hi = bisect.bisect_left(self.keys, prefix + "\U0010ffff")
        if not reverse:
            end = hi if limit is None else min(hi, lo + limit)
            return self.keys[lo:end]
        start = lo if limit is None else max(lo, hi - limit)
        return self.keys[start:hi][::-1]

    def clear(self) -> None:
        self.data.clear()
        self.keys.clear()


class FaultInjector:
    """Fails chosen operations, counted across every backend call.

    ``fail_at`` holds 1-based operation numbers that raise ``StorageError``
    before touching state. ``partial_after`` (in per-entry batch mode) makes
    the next batch apply only that many entries before failing.
    """

    def __init__(self):
        self.ops = 0
        self.fail_at: set[int] = set()
        self.fail_ops: set[str] | None = None
        self.partial_after: int | None = None
        self.hook: Callable[[str, object], None] | None = None
        self._lock = threading.Lock()

    def fail_nth(self, n: int, ops: Iterable[str] | None = None) -> None:
        """Fail the n-th operation from now (1-based)."""
        with self._lock:
            self.fail_at.add(self.ops + n)
            self.fail_ops = set(ops) if ops is not None else None

    def check(self, op: str, arg: object = None) -> None:
        with self._lock:
            self.ops += 1
            n = self.ops
            fail = n in self.fail_at and (self.fail_ops is None or op in self.fail_ops)
            if fail:
                self.fail_at.discard(n)
        if self.hook is not None:
            self.hook(op, arg)
        if fail:
            raise StorageError(f"injected failure on {op} (operation #{n})")


class MemoryBackend(Backend):
    """Thread-safe in-memory store.

    ``per_entry`` mode applies batches one entry at a time, the way cloud
    stores without multi-key atomicity behave; combined with
    ``faults.partial_after`` it persists a prefix of a batch and then fails.
    """

    def __init__(self, latency: tuple[float, float] | None = None,
                 per_entry: bool = False, seed: int | None = None,
                 read_latency_only: bool = False):
        self._store = _SortedKeys()
        self._lock = threading.RLock()
        self.faults = FaultInjector()
        self.latency = latency
        self.read_latency_only = read_latency_only
        self.per_entry = per_entry
        self._rng = random.Random(seed)
        self.counts = {"get": 0, "put_batch": 0, "list_prefix": 0, "delete_batch": 0}

    def _delay(self, read: bool) -> None:
        if not self.latency or (self.read_latency_only and not read):
            return
        lo, hi = self.latency
        with self._lock:
            d = self._rng.uniform(lo, hi)
        if d > 0:
            time.sleep(d / 1000.0)

    def get(self, sk):
        self._delay(True)
        self.faults.check("get", sk)
        with self._lock:
            self.counts["get"] += 1
            return self._store.data.get(sk)

    def put_batch(self, entries):
        entries = list(entries)
        if not entries:
            raise ValueError("put_batch needs at least one entry")
        self._delay(False)
        self.faults.check("put_batch", entries)
        with self._lock:
            self.counts["put_batch"] += 1
            if not self.per_entry:
                for sk, v in entries:
                    self._store.put(sk, bytes(v))
                return
            cut = self.faults.partial_after
            self.faults.partial_after = None
        for i, (sk, v) in enumerate(entries):
            if cut is not None and i >= cut:
                raise StorageError(f"injected partial batch failure after {cut} entries")
            with self._lock:
                self._store.put(sk, bytes(v))

    def list_prefix(self, prefix, limit=None, reverse=False):
        self._delay(True)
        self.faults.check("list_prefix", prefix)
        with self._lock:
            self.counts["list_prefix"] += 1
            return self._store.list_prefix(prefix, limit, reverse)

    def delete_batch(self, sks):
        sks = list(sks)
        self._delay(False)
        self.faults.check("delete_batch", sks)
        with self._lock:
            self.counts["delete_batch"] += 1
            for sk in sks:
                self._store.delete(sk)

    def __len__(self):
        with self._lock:
            return len(self._store.data)


# -- durable backend ----------------------------------------------------------

def encode_record(op: int, key: str, value: bytes = b"") -> bytes:
    kb = key.encode("utf-8")
    if len(kb) > 0xFFFF:
        raise ValueError("storage key too long")
    body = _HDR.pack(op, len(kb)) + kb + value
    body += _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)
    return _LEN.pack(len(body)) + body


def iter_records(buf: bytes):
    """Yield ``(op, key, value, end_offset)``; stops at the first torn record."""
    pos = 0
    n = len(buf)
    while pos + _LEN.size <= n:
        (length,) = _LEN.unpack_from(buf, pos)
        start = pos + _LEN.size
        end = start + length
        if length < _HDR.size + _CRC.size or end > n:
            return
        body = buf[start:end - _CRC.size]
        (crc,) = _CRC.unpack_from(buf, end - _CRC.size)
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            return
        op, klen = _HDR.unpack_from(body, 0)
        key = body[_HDR.size:_HDR.size + klen].decode("utf-8")
        value = bytes(body[_HDR.size + klen:])
        yield op, key, value, end
        pos = end


class FileBackend(Backend):
    """Append-only log with compaction into per-namespace sorted segments.

    Several processes may open the same ``root_path``: every operation takes
    an exclusive ``flock`` and first applies whatever other processes
    appended since the last call, so writes are serialised through a single
    appender at a time.
    """

    def __init__(self, root_path: str | os.PathLike, fsync: bool = True,
                 compact_bytes: int = 64 << 20):
        self.root = Path(root_path)
        self.root.mkdir(parents=True, exist_ok=True)
        self.log_path = self.root / "log.bin"
        self.gen_path = self.root / "GENERATION"
        self.fsync = fsync
        self.compact_bytes = compact_bytes
        self._store = _SortedKeys()
        self._tlock = threading.RLock()
        self._lockfd = os.open(self.root / "LOCK", os.O_RDWR | os.O_CREAT, 0o644)
        self._log_fd = os.open(self.log_path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)
        self._offset = 0
        self._generation = -1
        self._closed = False
        with self._locked():
            pass

    # locking and catch-up

    def _read_generation(self) -> int:
        try:
            return int(self.gen_path.read_text() or 0)
        except FileNotFoundError:
            return 0

    def _reload(self) -> None:
        self._store.clear()
        for seg in sorted(self.root.glob("*.seg")):
            for op, key, value, _ in iter_records(seg.read_bytes()):
                self._apply(op, key, value)
        self._offset = 0
        os.close(self._log_fd)
        self._log_fd = os.open(self.log_path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)
        self._catch_up(repair=True)

    def _catch_up(self, repair: bool = False) -> None:
        size = os.fstat(self._log_fd).st_size
        if size <= self._offset:
            return
        buf = os.pread(self._log_fd, size - self._offset, self._offset)
        good = 0
        for op, key, value, end in iter_records(buf):
            self._apply(op, key, value)
            good = end
        self._offset += good
        if good < len(buf) and repair:
            # torn tail from a crash mid-append; safe to drop, it was never acked
            log.warning("truncating %d torn bytes from %s", len(buf) - good, self.log_path)
            os.ftruncate(self._log_fd, self._offset)

    def _apply(self, op: int, key: str, value: bytes) -> None:
        if op == OP_PUT:
            self._store.put(key, value)
        elif op == OP_DELETE:
            self._store.delete(key)

    class _Guard:
        def __init__(self, backend: "FileBackend"):
            self.b = backend

        def __enter__(self):
            b = self.b
            b._tlock.acquire()
            if b._closed:
                b._tlock.release()
                raise StorageError("backend closed")
            try:
                fcntl.flock(b._lockfd, fcntl.LOCK_EX)
                gen = b._read_generation()
                if gen != b._generation or os.fstat(b._log_fd).st_size < b._offset:
                    b._generation = gen
                    b._reload()
                else:
                    b._catch_up(repair=True)
            except OSError as e:
                fcntl.flock(b._lockfd, fcntl.LOCK_UN)
                b._tlock.release()
                raise StorageError(str(e)) from e
            except BaseException:
                fcntl.flock(b._lockfd, fcntl.LOCK_UN)
                b._tlock.release()
                raise
            return b

        def __exit__(self, *exc):
            fcntl.flock(self.b._lockfd, fcntl.LOCK_UN)
            self.b._tlock.release()

    def _locked(self):
        return self._Guard(self)

    def _append(self, payload: bytes) -> None:
        try:
            view = memoryview(payload)
            while view:
                n = os.write(self._log_fd, view)
                view = view[n:]
            if self.fsync:
                os.fsync(self._log_fd)
        except OSError as e:
            raise StorageError(str(e)) from e
        self._offset += len(payload)

    # backend API

    def get(self, sk):
        with self._locked():
            return self._store.data.get(sk)

    def put_batch(self, entries):
        entries = list(entries)
        if not entries:
            raise ValueError("put_batch needs at least one entry")
        payload = b"".join(encode_record(OP_PUT, sk, bytes(v)) for sk, v in entries)
        with self._locked():
            self._append(payload)
            for sk, v in entries:
                self._store.put(sk, bytes(v))
            big = self._offset >= self.compact_bytes
        if big:
            self.compact()

    def delete_batch(self, sks):
        sks = list(sks)
        if not sks:
            return
        payload = b"".join(encode_record(OP_DELETE, sk) for sk in sks)
        with self._locked():
            self._append(payload)
            for sk in sks:
                self._store.delete(sk)

    def list_prefix(self, prefix, limit=None, reverse=False):
        with self._locked():
            return self._store.list_prefix(prefix, limit, reverse)

    def compact(self) -> None:
        """Rewrite live state into one sorted segment per namespace and reset the log.

        Replaying the old log over the new segments is idempotent, so a crash
        at any point in here leaves a readable store.
        """
        with self._locked():
            by_ns: dict[str, list[str]] = {}
            for sk in self._store.keys:
                by_ns.setdefault(sk.split("/", 1)[0], []).append(sk)
            written = set()
            for ns, keys in by_ns.items():
                tmp = self.root / f"{ns}.seg.tmp"
                with open(tmp, "wb") as f:
                    for sk in keys:
                        f.write(encode_record(OP_PUT, sk, self._store.data[sk]))
                    f.flush()
                    os.fsync(f.fileno())
                os.replace(tmp, self.root / f"{ns}.seg")
                written.add(f"{ns}.seg")
            for seg in self.root.glob("*.seg"):
                if seg.name not in written:
                    seg.unlink()
            os.ftruncate(self._log_fd, 0)
            os.fsync(self._log_fd)
            self._offset = 0
            self._generation += 1
            tmp = self.gen_path.with_suffix(".tmp")
            tmp.write_text(str(self._generation))
            os.replace(tmp, self.gen_path)

    def close(self) -> None:
        with self._tlock:
            if self._closed:
                return
            self._closed = True
            os.close(self._log_fd)
            os.close(self._lockfd)


def open_backend(cfg: BackendConfig) -> Backend:
    if cfg.kind == "memory":
        latency = None
        if cfg.harness and cfg.latency_max_ms > 0:
            latency = (cfg.latency_min_ms, cfg.latency_max_ms)
        return MemoryBackend(latency=latency, seed=cfg.seed)
    if cfg.kind == "file":
        if not cfg.root_path:
            raise ValueError("file backend needs root_path")
        return FileBackend(cfg.root_path, fsync=cfg.fsync)
    raise ValueError(f"unknown backend kind {cfg.kind!r}")
