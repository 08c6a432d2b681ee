"""Client driver: multi-hop transactions over a shim cluster or the raw store.

Each client is written as a generator that yields after every operation.
Threads run the generators to completion for real concurrency; a seeded
scheduler interleaves them one step at a time for reproducible runs.
"""

from __future__ import annotations

import random
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Protocol, Sequence

from ..core import (
    AftError,
    NodeUnavailable,
    NotReadable,
    SystemClock,
    TransactionId,
    random_uuid,
)
from ..storage import Backend
from .anomalies import (
    ABORT,
    COMMIT,
    READ,
    UNREADABLE,
    WRITE,
    OpLog,
    OpRecord,
    ValueTag,
    decode_value,
    encode_value,
)
from .zipf import ZipfSampler

BYPASS_PREFIX = "bypass/"


@dataclass(frozen=True)
class WorkloadSpec:
    num_clients: int = 10
    txns_per_client: int = 1000
    hops: int = 2
    reads_per_hop: int = 2
    writes_per_hop: int = 1
    keyspace: int = 1000
    zipf: float = 1.0
    value_size: int = 64
    mode: str = "shim"
    retry_limit: int = 5
    seed: int = 0
    # "retry" aborts and restarts on not_readable; "skip" logs the miss and
    # carries on so the write history does not depend on read outcomes.
    on_unreadable: str = "retry"

    def __post_init__(self):
        if self.hops < 1:
            raise ValueError("hops must be at least 1")
        if self.zipf < 0:
            raise ValueError("zipf must be non-negative")
        if self.num_clients < 1 or self.txns_per_client < 0 or self.keyspace < 1:
            raise ValueError("need at least one client and one key")
        if self.reads_per_hop < 0 or self.writes_per_hop < 0:
            raise ValueError("per-hop counts must be non-negative")
        if self.mode not in ("shim", "bypass"):
            raise ValueError(f"mode must be shim or bypass, got {self.mode!r}")
        if self.on_unreadable not in ("retry", "skip"):
            raise ValueError("on_unreadable must be retry or skip")


@dataclass(frozen=True)
class Hop:
    reads: tuple[str, ...]
    writes: tuple[str, ...]


@dataclass(frozen=True)
class TxnPlan:
    hops: tuple[Hop, ...]

    @property
    def writeset(self) -> frozenset[str]:
        return frozenset(k for h in self.hops for k in h.writes)


def key_name(rank: int) -> str:
    return f"k{rank - 1}"


def client_plans(spec: WorkloadSpec, client: int) -> Iterator[TxnPlan]:
    """Keys one client will touch, drawn lazily from a per-client seed."""
    rng = random.Random(spec.seed * 1_000_003 + client)
    z = ZipfSampler(spec.keyspace, spec.zipf, rng)
    for _ in range(spec.txns_per_client):
        yield TxnPlan(tuple(
            Hop(tuple(key_name(z.sample()) for _ in range(spec.reads_per_hop)),
                tuple(key_name(z.sample()) for _ in range(spec.writes_per_hop)))
            for _ in range(spec.hops)))


def plan_transactions(spec: WorkloadSpec) -> list[list[TxnPlan]]:
    return [list(client_plans(spec, c)) for c in range(spec.num_clients)]


@dataclass
class Metrics:
    committed: int = 0
    gave_up: int = 0
    retries: int = 0
    not_readable: int = 0
    errors: int = 0
    elapsed_s: float = 0.0
    latencies_ms: list[float] = field(default_factory=list)

    def merge(self, other: "Metrics") -> None:
        self.committed += other.committed
        self.gave_up += other.gave_up
        self.retries += other.retries
        self.not_readable += other.not_readable
        self.errors += other.errors
        self.latencies_ms.extend(other.latencies_ms)

    @property
    def throughput_tps(self) -> float:
        return self.committed / self.elapsed_s if self.elapsed_s > 0 else 0.0

    def percentile(self, q: float) -> float:
        if not self.latencies_ms:
            return 0.0
        if len(self.latencies_ms) == 1:
            return self.latencies_ms[0]
        cuts = statistics.quantiles(self.latencies_ms, n=100, method="inclusive")
        return cuts[min(98, max(0, round(q * 100) - 1))]

    @property
    def p50_ms(self) -> float:
        return self.percentile(0.50)

    @property
    def p99_ms(self) -> float:
        return self.percentile(0.99)


@dataclass
class WorkloadResult:
    spec: WorkloadSpec
    log: OpLog
    metrics: Metrics


class Deployment(Protocol):
    """What the driver needs: per-client node endpoints and the raw store."""

    storage: Backend

    def endpoints(self, client: int) -> Sequence: ...


class BypassSession:
    """Plain reads and writes straight to the store, metadata embedded in values.

    Each version lives at ``bypass/{key}/{ts}-{uuid}``; reads take the newest
    listed version, the way an unmodified application would.
    """

    def __init__(self, storage: Backend, uuid: str, ts: int, cowritten: frozenset[str]):
        self.storage = storage
        self.tid = TransactionId(ts, uuid)
        self.cowritten = cowritten

    def put(self, key: str, value: bytes) -> None:
        self.storage.put(f"{BYPASS_PREFIX}{key}/{self.tid.render()}", value)

    def get(self, key: str) -> bytes | None:
        for sk in self.storage.list_prefix(f"{BYPASS_PREFIX}{key}/", limit=1, reverse=True):
            value = self.storage.get(sk)
            if value is not None:
                return value
        return None


def _client_steps(spec: WorkloadSpec, client: int, plans: Iterable[TxnPlan], dep: Deployment,
                  log: OpLog, metrics: Metrics, uuids: Callable[[], str],
                  clock) -> Iterator[None]:
    nodes = dep.endpoints(client) if spec.mode == "shim" else ()
    for n, plan in enumerate(plans):
        started = time.perf_counter()
        resume = None
        for attempt in range(spec.retry_limit + 1):
            if attempt:
                metrics.retries += 1
            if spec.mode == "bypass":
                ok = yield from _bypass_attempt(spec, client, n, attempt, plan, dep, log,
                                                uuids, clock)
            else:
                node = nodes[(client + n + attempt) % len(nodes)]
                ok = yield from _shim_attempt(spec, client, n, attempt, plan, node, log,
                                              metrics, resume)
                if isinstance(ok, str):
                    resume, ok = ok, False
                else:
                    resume = None
            if ok:
                metrics.committed += 1
                metrics.latencies_ms.append((time.perf_counter() - started) * 1000.0)
                break
        else:
            metrics.gave_up += 1


def _shim_attempt(spec, client, n, attempt, plan, node, log, metrics,
                  resume: str | None) -> Iterator[None]:
    """One try at a transaction.

    Returns True on commit, False to retry with a fresh uuid, or the uuid
    itself when the node died during commit and the outcome is unknown; the
    retry then reuses that uuid so the transaction commits at most once.
    """
    try:
        handle = node.start_transaction(resume)
    except AftError:
        metrics.errors += 1
        yield
        return resume or False
    uuid = handle.uuid
    seq = 0
    committing = False

    def rec(**kw):
        log.append(OpRecord(client, n, uuid, kw.pop("hop", 0), attempt=attempt, **kw))

    try:
        for h, hop in enumerate(plan.hops):
            for key in hop.reads:
                try:
                    r = node.get_version(handle, key)
                except NotReadable:
                    metrics.not_readable += 1
                    if spec.on_unreadable == "skip":
                        rec(hop=h, kind=UNREADABLE, key=key)
                        yield
                        continue
                    raise
                if r.value is None:
                    rec(hop=h, kind=READ, key=key, reported=r.tid, own=r.own_write)
                else:
                    tag = decode_value(r.value)
                    rec(hop=h, kind=READ, key=key, writer=tag.writer, seq=tag.seq,
                        reported=r.tid, own=r.own_write)
                yield
            for key in hop.writes:
                seq += 1
                node.put(handle, key, encode_value(ValueTag(uuid, key, seq), spec.value_size))
                rec(hop=h, kind=WRITE, key=key, writer=uuid, seq=seq)
                yield
        committing = True
        tid = node.commit_transaction(handle)
    except NotReadable:
        _safe_abort(node, handle)
        rec(kind=ABORT)
        yield
        return False
    except NodeUnavailable:
        metrics.errors += 1
        rec(kind=ABORT)
        yield
        return uuid if committing or resume else False
    except AftError:
        metrics.errors += 1
        _safe_abort(node, handle)
        rec(kind=ABORT)
        yield
        return False
    rec(hop=len(plan.hops) - 1, kind=COMMIT, tid=tid)
    yield
    return True


def _safe_abort(node, handle) -> None:
    try:
        node.abort_transaction(handle)
    except AftError:
        pass


def _bypass_attempt(spec, client, n, attempt, plan, dep, log, uuids, clock) -> Iterator[None]:
    uuid = uuids()
    cowritten = plan.writeset
    sess = BypassSession(dep.storage, uuid, clock.now(), cowritten)
    seq = 0
    for h, hop in enumerate(plan.hops):
        for key in hop.reads:
            raw = sess.get(key)
            if raw is None:
                log.append(OpRecord(client, n, uuid, h, READ, key))
            else:
                tag = decode_value(raw)
                log.append(OpRecord(client, n, uuid, h, READ, key, tag.writer, tag.seq,
                                    reported=TransactionId(tag.ts, tag.writer)))
            yield
        for key in hop.writes:
            seq += 1
            tag = ValueTag(uuid, key, seq, sess.tid.timestamp, cowritten)
            sess.put(key, encode_value(tag, spec.value_size))
            log.append(OpRecord(client, n, uuid, h, WRITE, key, uuid, seq))
            yield
    log.append(OpRecord(client, n, uuid, len(plan.hops) - 1, COMMIT, tid=sess.tid,
                        cowritten=cowritten))
    yield
    return True


def run_workload(spec: WorkloadSpec, dep: Deployment, *, threads: bool = True,
                 scheduler_seed: int | None = None,
                 on_step: Callable[[int], None] | None = None,
                 uuids: Callable[[], str] = random_uuid, clock=None,
                 stop: threading.Event | None = None) -> WorkloadResult:
    """Run every client's transactions and return the merged log and metrics.

    With ``threads=False`` the clients are interleaved one operation at a time
    in an order drawn from ``scheduler_seed``; ``on_step`` is then called with
    the global step number after each operation. ``stop`` ends threaded runs
    early once set; a client's in-flight transaction is then abandoned
    uncommitted and left for the session timeout.
    """
    clock = clock or SystemClock()
    log = OpLog()
    per_client = [Metrics() for _ in range(spec.num_clients)]
    gens = [_client_steps(spec, c, client_plans(spec, c), dep, log, per_client[c], uuids, clock)
            for c in range(spec.num_clients)]
    started = time.perf_counter()
    if threads:
        def drive(g):
            for _ in g:
                if stop is not None and stop.is_set():
                    g.close()
                    return
        workers = [threading.Thread(target=drive, args=(g,), daemon=True) for g in gens]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
    else:
        rng = random.Random(scheduler_seed)
        live = list(gens)
        step = 0
        while live:
            i = rng.randrange(len(live))
            try:
                next(live[i])
            except StopIteration:
                live.pop(i)
                continue
            step += 1
            if on_step is not None:
                on_step(step)
    metrics = Metrics(elapsed_s=time.perf_counter() - started)
    for m in per_client:
        metrics.merge(m)
    return WorkloadResult(spec, log, metrics)
