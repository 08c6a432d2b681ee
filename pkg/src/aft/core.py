"""Identifiers, versions, commit records and the storage-key encoding.

Every version of a key lives at its own storage key, derived from the id of
the transaction that wrote it, so nothing is ever overwritten in place.
Timestamps are rendered as 20-digit zero-padded decimals which makes the
lexicographic order of rendered keys match the order of transaction ids.
"""

from __future__ import annotations

import json
import random
import threading
import time
import uuid as uuidlib
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

DATA_PREFIX = "data/"
COMMIT_PREFIX = "commit/"
SEP = "/"
TS_WIDTH = 20
MAX_TS = 10**TS_WIDTH - 1
# Spill keys carry this timestamp; no committed version can have it.
PROVISIONAL_TS = 0


class AftError(Exception):
    """Base class for errors surfaced to clients; ``code`` is the wire code."""

    code = "internal_error"


class UnknownTransaction(AftError):
    code = "unknown_txn"


class NotRunning(AftError):
    code = "not_running"


class NotReadable(AftError):
    """No version of the key can join the transaction's read set.

    The client is expected to abort and retry.
    """

    code = "not_readable"


class StorageError(AftError):
    """Backend failure; retryable."""

    code = "storage_error"


class NodeUnavailable(AftError):
    code = "unavailable"


class SimulatedCrash(NodeUnavailable):
    """Raised by crash hooks; the node that raised it is dead."""


class InvalidKey(AftError, ValueError):
    code = "invalid_key"


class _TidFields(NamedTuple):
    timestamp: int
    uuid: str


class TransactionId(_TidFields):
    """``(timestamp, uuid)``; ties on timestamp break on the uuid string.

    A tuple underneath, so ordering and hashing run at C speed; ids are
    compared and hashed constantly by the index and GC.
    """

    __slots__ = ()

    def __new__(cls, timestamp: int, uuid: str):
        if not 0 <= timestamp <= MAX_TS:
            raise ValueError(f"timestamp out of range: {timestamp}")
        if len(uuid) != 32 or uuid.lower() != uuid:
            raise ValueError(f"uuid must be 32 lowercase hex chars: {uuid!r}")
        int(uuid, 16)
        return super().__new__(cls, timestamp, uuid)

    def render(self) -> str:
        return f"{self.timestamp:0{TS_WIDTH}d}-{self.uuid}"

    @classmethod
    def parse(cls, text: str) -> "TransactionId":
        ts, sep, uid = text.partition("-")
        if not sep or len(ts) != TS_WIDTH or not ts.isdigit():
            raise ValueError(f"malformed transaction id: {text!r}")
        return cls(int(ts), uid)

    def to_json(self) -> dict:
        return {"ts": self.timestamp, "uuid": self.uuid}

    @classmethod
    def from_json(cls, obj: dict) -> "TransactionId":
        return cls(int(obj["ts"]), str(obj["uuid"]))


# Stands for "this key had no version" in a read set. Every committed id has
# a timestamp of at least 1, so this sorts below all of them.
NULL_VERSION = TransactionId(0, "0" * 32)


def compare_tids(a: TransactionId, b: TransactionId) -> int:
    """Return -1, 0 or 1 as ``a`` is less than, equal to or greater than ``b``."""
    if a == b:
        return 0
    return -1 if a < b else 1


@dataclass(frozen=True)
class PendingTxnHandle:
    uuid: str
    start_time: float


@dataclass(frozen=True)
class KeyVersion:
    key: str
    tid: TransactionId
    cowritten: frozenset[str]
    value: bytes = b""

    def __post_init__(self):
        if self.key not in self.cowritten:
            raise ValueError(f"{self.key!r} missing from its own cowritten set")


@dataclass(frozen=True)
class CommitRecord:
    tid: TransactionId
    writeset: frozenset[str]

    def __post_init__(self):
        if not self.writeset:
            raise ValueError("commit record needs a nonempty write set")

    def to_json(self) -> dict:
        return {"ts": self.tid.timestamp, "uuid": self.tid.uuid,
                "writeset": sorted(self.writeset)}

    @classmethod
    def from_json(cls, obj: dict) -> "CommitRecord":
        return cls(TransactionId.from_json(obj), frozenset(obj["writeset"]))

    def encode(self) -> bytes:
        return json.dumps(self.to_json(), separators=(",", ":")).encode()

    @classmethod
    def decode(cls, raw: bytes) -> "CommitRecord":
        return cls.from_json(json.loads(raw))


def check_key(key: str) -> None:
    if not isinstance(key, str) or not key:
        raise InvalidKey("key must be a nonempty string")
    if SEP in key:
        raise InvalidKey(f"key may not contain {SEP!r}: {key!r}")


def encode_data_key(key: str, tid: TransactionId) -> str:
    check_key(key)
    return f"{DATA_PREFIX}{key}{SEP}{tid.render()}"


def encode_commit_key(tid: TransactionId) -> str:
    return f"{COMMIT_PREFIX}{tid.render()}"


def data_key_prefix(key: str) -> str:
    check_key(key)
    return f"{DATA_PREFIX}{key}{SEP}"


def decode_data_key(sk: str) -> tuple[str, TransactionId]:
    if not sk.startswith(DATA_PREFIX):
        raise ValueError(f"not a data key: {sk!r}")
    key, sep, rendered = sk[len(DATA_PREFIX):].rpartition(SEP)
    if not sep or not key:
        raise ValueError(f"not a data key: {sk!r}")
    return key, TransactionId.parse(rendered)


def decode_commit_key(sk: str) -> TransactionId:
    if not sk.startswith(COMMIT_PREFIX):
        raise ValueError(f"not a commit key: {sk!r}")
    return TransactionId.parse(sk[len(COMMIT_PREFIX):])


def decode_storage_key(sk: str) -> tuple[str | None, TransactionId]:
    """Decode either namespace; the key part is None for commit keys."""
    if sk.startswith(COMMIT_PREFIX):
        return None, decode_commit_key(sk)
    return decode_data_key(sk)


def is_provisional(tid: TransactionId) -> bool:
    return tid.timestamp == PROVISIONAL_TS


# -- clocks and id sources ---------------------------------------------------

class SystemClock:
    """Milliseconds since the epoch."""

    def now(self) -> int:
        return time.time_ns() // 1_000_000


class LogicalClock:
    """Counter that advances by one on every reading."""

    def __init__(self, start: int = 0):
        self._value = start
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            self._value += 1
            return self._value


def make_clock(mode: str):
    if mode == "system":
        return SystemClock()
    if mode == "logical":
        return LogicalClock()
    raise ValueError(f"unknown clock mode {mode!r}")


def random_uuid() -> str:
    return uuidlib.uuid4().hex


@dataclass
class SeededUuids:
    """Deterministic uuid source for reproducible runs."""

    seed: int
    _rng: random.Random = field(init=False, repr=False)
    _lock: threading.Lock = field(init=False, repr=False, default_factory=threading.Lock)

    def __post_init__(self):
        self._rng = random.Random(self.seed)

    def __call__(self) -> str:
        with self._lock:
            return f"{self._rng.getrandbits(128):032x}"


UuidSource = Callable[[], str]
