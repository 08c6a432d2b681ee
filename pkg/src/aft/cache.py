"""LRU-by-bytes cache of committed version values."""

from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Iterable

from .core import TransactionId

DEFAULT_CACHE_BYTES = 64 << 20


class DataCache:
    def __init__(self, capacity_bytes: int = DEFAULT_CACHE_BYTES):
        self.capacity_bytes = capacity_bytes
        self._items: OrderedDict[tuple[str, TransactionId], bytes] = OrderedDict()
        self._size = 0
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key: str, tid: TransactionId) -> bytes | None:
        with self._lock:
            value = self._items.get((key, tid))
            if value is None:
                self.misses += 1
                return None
            self._items.move_to_end((key, tid))
            self.hits += 1
            return value

    def put(self, key: str, tid: TransactionId, value: bytes) -> None:
        if len(value) > self.capacity_bytes:
            return
        with self._lock:
            old = self._items.pop((key, tid), None)
            if old is not None:
                self._size -= len(old)
            self._items[(key, tid)] = value
            self._size += len(value)
            while self._size > self.capacity_bytes:
                _, evicted = self._items.popitem(last=False)
                self._size -= len(evicted)

    def evict(self, tid: TransactionId, keys: Iterable[str]) -> None:
        with self._lock:
            for key in keys:
                old = self._items.pop((key, tid), None)
                if old is not None:
                    self._size -= len(old)

    def clear(self) -> None:
        with self._lock:
            self._items.clear()
            self._size = 0

    @property
    def size_bytes(self) -> int:
        return self._size

    def __len__(self) -> int:
        return len(self._items)
