"""Commit-set multicast between nodes, pruned by supersedence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

from .core import CommitRecord
from .index import CommitIndex

if TYPE_CHECKING:
    from .txn import TransactionManager

DEFAULT_MULTICAST_INTERVAL = 1.0


def is_superseded(rec: CommitRecord, index: CommitIndex) -> bool:
    """True when every key ``rec`` wrote has a newer version in ``index``.

    For an indexed record this is exactly "no key has ``rec`` as its latest
    version". A record the index has not seen is only superseded if each of
    its keys already has a strictly newer version.
    """
    for key in rec.writeset:
        latest = index.latest(key)
        if latest is None or latest <= rec.tid:
            return False
    return True


@dataclass(frozen=True)
class CommitBatch:
    origin: str
    records: tuple[CommitRecord, ...]
    sequence: int

    def __post_init__(self):
        tids = [r.tid for r in self.records]
        if len(tids) != len(set(tids)):
            raise ValueError("duplicate transaction in commit batch")

    def to_message(self) -> dict:
        return {"type": "commit_batch", "origin": self.origin, "seq": self.sequence,
                "records": [r.to_json() for r in self.records]}

    @classmethod
    def from_message(cls, msg: dict) -> "CommitBatch":
        return cls(str(msg["origin"]),
                   tuple(CommitRecord.from_json(r) for r in msg["records"]),
                   int(msg["seq"]))


def collect_broadcast(node: "TransactionManager", prune: bool = True
                      ) -> tuple[CommitBatch, list[CommitRecord]]:
    """Drain the node's recent commits.

    Returns the batch for peers (superseded records dropped when ``prune``)
    and the complete, unpruned list for the fault manager. An empty batch is
    still numbered so it doubles as a heartbeat.
    """
    recent = node.take_recent_commits()
    with node.index.lock:
        if prune:
            kept = [r for r in recent if not is_superseded(r, node.index)]
        else:
            kept = list(recent)
    return CommitBatch(node.node_id, tuple(kept), node.next_sequence()), recent


def merge_remote(batch: CommitBatch, node: "TransactionManager") -> int:
    """Merge a peer's batch; records already superseded locally are skipped."""
    return merge_records(batch.records, node)


def merge_records(records: Iterable[CommitRecord], node: "TransactionManager") -> int:
    merged = 0
    for rec in records:
        if node.record_committed(rec):
            merged += 1
    return merged
