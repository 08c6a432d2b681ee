"""Operation logs and the RYW / fractured-read anomaly counter.

Every value the harness writes carries a small JSON tag naming its writer,
key and write sequence, so the checker can tell which version a read saw
without trusting anything the system under test reports about itself.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from ..core import TransactionId

READ, WRITE, COMMIT, ABORT, UNREADABLE = "read", "write", "commit", "abort", "unreadable"


@dataclass(frozen=True)
class ValueTag:
    writer: str
    key: str
    seq: int
    ts: int = 0
    cowritten: frozenset[str] | None = None


def encode_value(tag: ValueTag, size: int = 0) -> bytes:
    body = {"w": tag.writer, "k": tag.key, "s": tag.seq}
    if tag.ts:
        body["t"] = tag.ts
    if tag.cowritten is not None:
        body["c"] = sorted(tag.cowritten)
    raw = json.dumps(body, separators=(",", ":")).encode()
    return raw + b" " * max(0, size - len(raw))


def decode_value(raw: bytes) -> ValueTag:
    body = json.loads(raw)
    cw = body.get("c")
    return ValueTag(body["w"], body["k"], int(body["s"]), int(body.get("t", 0)),
                    frozenset(cw) if cw is not None else None)


@dataclass(frozen=True)
class OpRecord:
    """One client-side event.

    For reads ``writer``/``seq`` come from the value tag (None for NULL),
    ``reported`` is whatever version the system claimed, and ``tid`` and
    ``cowritten`` are filled in by ``OpLog.resolve`` or, in bypass mode, from
    the tag itself. For commits ``tid`` is the committed id.
    """

    client: int
    logical: int
    txn: str
    hop: int
    kind: str
    key: str | None = None
    writer: str | None = None
    seq: int | None = None
    tid: TransactionId | None = None
    cowritten: frozenset[str] | None = None
    reported: TransactionId | None = None
    own: bool = False
    attempt: int = 0


@dataclass(frozen=True)
class CommitInfo:
    tid: TransactionId
    writeset: frozenset[str]
    final_seq: dict[str, int]


class OpLog:
    """Append-only log, sharded per client so clients never contend."""

    def __init__(self):
        self.shards: dict[int, list[OpRecord]] = defaultdict(list)

    def append(self, rec: OpRecord) -> None:
        self.shards[rec.client].append(rec)

    def records(self) -> list[OpRecord]:
        return [r for c in sorted(self.shards) for r in self.shards[c]]

    def __len__(self) -> int:
        return sum(len(s) for s in self.shards.values())

    def merge(self, other: "OpLog") -> None:
        for c, recs in other.shards.items():
            self.shards[c].extend(recs)

    def attempts(self) -> dict[tuple[int, int, int], list[OpRecord]]:
        out: dict[tuple[int, int, int], list[OpRecord]] = {}
        for rec in self.records():
            out.setdefault((rec.client, rec.logical, rec.attempt), []).append(rec)
        return out

    def ledger(self) -> dict[str, CommitInfo]:
        """Committed attempts keyed by uuid, built from the log alone."""
        out = {}
        for recs in self.attempts().values():
            commits = [r for r in recs if r.kind == COMMIT]
            if not commits:
                continue
            final = {}
            for r in recs:
                if r.kind == WRITE:
                    final[r.key] = r.seq
            cw = commits[-1].cowritten
            out[recs[0].txn] = CommitInfo(commits[-1].tid,
                                          cw if cw is not None else frozenset(final), final)
        return out

    def signature(self) -> list[tuple]:
        """Comparable form used by determinism checks."""
        return [(r.client, r.logical, r.attempt, r.txn, r.hop, r.kind, r.key, r.writer, r.seq,
                 r.tid.render() if r.tid else None) for r in self.records()]


@dataclass(frozen=True)
class AnomalyCounts:
    ryw: int
    fr: int
    transactions: int
    dirty: int = 0


def _observed(rec: OpRecord, ledger: dict[str, CommitInfo]):
    """(tid, cowritten) a read saw, or the string "dirty"."""
    if rec.writer is None:
        return None, frozenset()
    info = ledger.get(rec.writer)
    if info is None or info.final_seq.get(rec.key) != rec.seq:
        return "dirty"
    return info.tid, info.writeset


def _check_attempt(recs: list[OpRecord], ledger: dict[str, CommitInfo]) -> tuple[bool, bool, bool]:
    own: dict[str, int] = {}
    reads: dict[str, tuple[TransactionId | None, frozenset[str]]] = {}
    ryw = fr = dirty = False
    for rec in recs:
        if rec.kind == WRITE:
            own[rec.key] = rec.seq
        elif rec.kind == READ:
            if rec.key in own:
                if rec.writer != rec.txn or rec.seq != own[rec.key]:
                    ryw = True
                continue
            obs = _observed(rec, ledger)
            if obs == "dirty":
                dirty = fr = True
                continue
            prev = reads.get(rec.key)
            if prev is None:
                reads[rec.key] = obs
            elif prev[0] != obs[0]:
                fr = True
    for key, (tid, cowritten) in reads.items():
        if tid is None:
            continue
        for other in cowritten:
            if other == key or other not in reads:
                continue
            seen = reads[other][0]
            if seen is None or seen < tid:
                fr = True
    return ryw, fr, dirty


def count_anomalies(log: OpLog) -> AnomalyCounts:
    """Count logical transactions with at least one RYW or FR anomaly.

    A transaction counts once per kind however many attempts or reads were
    affected. Reads of uncommitted or intermediate values count as FR.
    """
    ledger = log.ledger()
    ryw: set[tuple[int, int]] = set()
    fr: set[tuple[int, int]] = set()
    dirty: set[tuple[int, int]] = set()
    logical: set[tuple[int, int]] = set()
    for (client, n, _), recs in log.attempts().items():
        logical.add((client, n))
        a, b, c = _check_attempt(recs, ledger)
        if a:
            ryw.add((client, n))
        if b:
            fr.add((client, n))
        if c:
            dirty.add((client, n))
    return AnomalyCounts(len(ryw), len(fr), len(logical), len(dirty))


def wrong_value_reads(log: OpLog) -> int:
    """Reads whose value does not belong to the version the system reported."""
    bad = 0
    for rec in log.records():
        if rec.kind != READ or rec.own:
            continue
        if rec.writer is None:
            if rec.reported is not None:
                bad += 1
        elif rec.reported is None or rec.reported.uuid != rec.writer:
            bad += 1
    return bad


def resolve(log: OpLog) -> OpLog:
    """Copy of ``log`` with every external read's tid and cowritten set filled in."""
    ledger = log.ledger()
    out = OpLog()
    for rec in log.records():
        if rec.kind == READ and not rec.own and rec.writer is not None and rec.tid is None:
            info = ledger.get(rec.writer)
            if info is not None:
                rec = OpRecord(**{**rec.__dict__, "tid": info.tid, "cowritten": info.writeset})
        out.append(rec)
    return out


def reads_of(log: Iterable[OpRecord]) -> list[OpRecord]:
    return [r for r in log if r.kind == READ]
