"""Per-transaction atomic write buffer.

Updates stay here until commit. When a transaction's buffered bytes reach
the spill threshold they are written to provisional storage keys (timestamp
0 plus the transaction's uuid). Nothing indexes those keys, so no other
transaction can reach them; commit copies them to their final locations.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

from .core import (
    PROVISIONAL_TS,
    NotRunning,
    PendingTxnHandle,
    TransactionId,
    UnknownTransaction,
    check_key,
    encode_data_key,
)
from .storage import Backend

DEFAULT_SPILL_THRESHOLD = 4 << 20


class TxnStatus(str, Enum):
    RUNNING = "running"
    COMMITTING = "committing"
    COMMITTED = "committed"
    ABORTED = "aborted"


class Spilled(NamedTuple):
    """Location of a value that was spilled to storage."""

    storage_key: str


@dataclass
class BufferedTxn:
    handle: PendingTxnHandle
    updates: dict[str, bytes] = field(default_factory=dict)
    spilled: dict[str, str] = field(default_factory=dict)
    bytes_buffered: int = 0
    status: TxnStatus = TxnStatus.RUNNING

    @property
    def uuid(self) -> str:
        return self.handle.uuid

    def written_keys(self) -> set[str]:
        return set(self.updates) | set(self.spilled)


def _entry_size(key: str, value: bytes) -> int:
    return len(key.encode("utf-8")) + len(value)


def provisional_key(key: str, uuid: str) -> str:
    return encode_data_key(key, TransactionId(PROVISIONAL_TS, uuid))


class WriteBuffer:
    """Buffers for every transaction in flight on one node.

    ``on_discard`` receives provisional storage keys that are no longer
    needed; the caller deletes them off the request path.
    """

    def __init__(self, storage: Backend, spill_threshold: int = DEFAULT_SPILL_THRESHOLD,
                 on_discard: Callable[[list[str]], None] | None = None,
                 crash_hook: Callable[[str, object], None] | None = None):
        if spill_threshold <= 0:
            raise ValueError("spill_threshold must be positive")
        self.storage = storage
        self.spill_threshold = spill_threshold
        self.on_discard = on_discard
        self.crash_hook = crash_hook
        self._txns: dict[str, BufferedTxn] = {}
        self._lock = threading.Lock()

    def open(self, handle: PendingTxnHandle) -> BufferedTxn:
        with self._lock:
            buf = BufferedTxn(handle)
            self._txns[handle.uuid] = buf
            return buf

    def lookup(self, uuid: str) -> BufferedTxn:
        try:
            return self._txns[uuid]
        except KeyError:
            raise UnknownTransaction(uuid) from None

    def __contains__(self, uuid: str) -> bool:
        return uuid in self._txns

    def buffer_put(self, uuid: str, key: str, value: bytes) -> None:
        check_key(key)
        buf = self.lookup(uuid)
        if buf.status is not TxnStatus.RUNNING:
            raise NotRunning(f"transaction {uuid} is {buf.status.value}")
        old = buf.updates.get(key)
        if old is not None:
            buf.bytes_buffered -= _entry_size(key, old)
        buf.updates[key] = bytes(value)
        buf.bytes_buffered += _entry_size(key, value)
        if buf.bytes_buffered >= self.spill_threshold:
            self.spill(uuid)

    def read_own_write(self, uuid: str, key: str) -> bytes | None:
        buf = self.lookup(uuid)
        if key in buf.updates:
            return buf.updates[key]
        sk = buf.spilled.get(key)
        if sk is None:
            return None
        return self.storage.get(sk)

    def spill(self, uuid: str) -> list[str]:
        """Write the in-memory updates to provisional keys; returns those keys.

        On backend failure the updates stay buffered and the transaction keeps
        running. A key spilled twice reuses its provisional key.
        """
        buf = self.lookup(uuid)
        if not buf.updates or buf.bytes_buffered < self.spill_threshold:
            raise ValueError("nothing to spill below the threshold")
        entries = [(provisional_key(k, uuid), v) for k, v in buf.updates.items()]
        if self.crash_hook is not None:
            self.crash_hook("during_spill", entries)
        self.storage.put_batch(entries)
        for (sk, _), key in zip(entries, buf.updates):
            buf.spilled[key] = sk
        buf.updates.clear()
        buf.bytes_buffered = 0
        return [sk for sk, _ in entries]

    def drain_for_commit(self, uuid: str) -> list[tuple[str, bytes | Spilled]]:
        """Return the full write set, one entry per key, and mark it committing.

        Buffered values win over spilled ones for keys rewritten after a spill.
        """
        buf = self.lookup(uuid)
        if buf.status is not TxnStatus.RUNNING:
            raise NotRunning(f"transaction {uuid} is {buf.status.value}")
        buf.status = TxnStatus.COMMITTING
        out: list[tuple[str, bytes | Spilled]] = list(buf.updates.items())
        out += [(k, Spilled(sk)) for k, sk in buf.spilled.items() if k not in buf.updates]
        return out

    def reopen(self, uuid: str) -> None:
        """Return a transaction to running after a failed commit attempt."""
        buf = self.lookup(uuid)
        if buf.status is TxnStatus.COMMITTING:
            buf.status = TxnStatus.RUNNING

    def finish(self, uuid: str) -> None:
        """Drop a committed transaction's buffer; its spill keys become garbage."""
        with self._lock:
            buf = self._txns.pop(uuid, None)
        if buf is None:
            return
        buf.status = TxnStatus.COMMITTED
        self._release(buf)

    def discard(self, uuid: str) -> None:
        with self._lock:
            buf = self._txns.pop(uuid, None)
        if buf is None:
            return
        buf.status = TxnStatus.ABORTED
        self._release(buf)

    def _release(self, buf: BufferedTxn) -> None:
        buf.updates.clear()
        buf.bytes_buffered = 0
        garbage = list(buf.spilled.values())
        buf.spilled.clear()
        if garbage and self.on_discard is not None:
            self.on_discard(garbage)

    def uuids(self) -> list[str]:
        with self._lock:
            return list(self._txns)
