"""Crash-point injection and post-mortem checks.

A plan names a node, a point in the commit path and which hit of that
point should kill the node. The injector wipes the node's memory at that
moment, exactly as a process crash would, and the report then checks
visibility, recovery and exactly-once retry from the outside.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from ..core import (
    COMMIT_PREFIX,
    DATA_PREFIX,
    AftError,
    SimulatedCrash,
    TransactionId,
    decode_data_key,
    is_provisional,
)
from .anomalies import ValueTag, decode_value, encode_value

CRASH_POINTS = ("after_data_write", "after_commit_record", "after_ack_before_broadcast",
                "during_spill")


@dataclass(frozen=True)
class CrashPlan:
    node: int = 0
    point: str = "after_commit_record"
    trigger: int = 1

    def __post_init__(self):
        if self.point not in CRASH_POINTS + ("random",):
            raise ValueError(f"unknown crash point {self.point!r}")
        if self.trigger < 1:
            raise ValueError("trigger counts from 1")

    def resolve(self, rng: random.Random) -> "CrashPlan":
        if self.point != "random":
            return self
        return CrashPlan(self.node, rng.choice(CRASH_POINTS), self.trigger)

    @classmethod
    def parse(cls, text: str) -> "CrashPlan":
        """``point[@node[#trigger]]``, e.g. ``after_data_write@1#3``."""
        point, _, rest = text.partition("@")
        node, _, trig = rest.partition("#")
        return cls(int(node or 0), point, int(trig or 1))


class CrashInjector:
    """Crash hook for one node; fires once, on the plan's trigger-th hit."""

    def __init__(self, plan: CrashPlan, manager):
        self.plan = plan
        self.manager = manager
        self.hits = 0
        self.fired = False
        self.arg: object = None

    def __call__(self, point: str, arg: object = None) -> None:
        if self.fired or point != self.plan.point:
            return
        self.hits += 1
        if self.hits < self.plan.trigger:
            return
        self.fired = True
        self.arg = arg
        if point == "during_spill":
            # Die part-way through the spill: some provisional keys land.
            entries = list(arg)
            head = entries[: max(1, len(entries) // 2)]
            self.manager.storage.put_batch(head)
        self.manager.crash()
        if point != "after_ack_before_broadcast":
            raise SimulatedCrash(f"crash at {point}")

    def install(self) -> "CrashInjector":
        self.manager.crash_hook = self
        return self


@dataclass
class CrashReport:
    plan: CrashPlan
    fired: bool = False
    uuid: str | None = None
    acked_tid: TransactionId | None = None
    retry_tid: TransactionId | None = None
    partial_visibility: int = 0
    commit_records: int = 0
    visible_before_retry: bool = False
    leftover_keys: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def verdict(self) -> str:
        if not self.fired:
            return "inconclusive"
        ok = (self.partial_visibility == 0 and self.commit_records == 1
              and self.leftover_keys == 0 and not self.notes)
        return "pass" if ok else "fail"


def _visible_count(node, keys: list[str], uuid: str) -> int:
    """How many of ``keys`` a fresh transaction on ``node`` sees from ``uuid``."""
    h = node.start_transaction()
    seen = 0
    try:
        for k in keys:
            r = node.get_version(h, k)
            if r.value is not None and decode_value(r.value).writer == uuid:
                seen += 1
    finally:
        node.abort_transaction(h)
    return seen


def _commit_records_for(storage, uuid: str) -> list[str]:
    return [sk for sk in storage.list_prefix(COMMIT_PREFIX) if sk.endswith("-" + uuid)]


def _leftovers(storage, uuid: str, final: TransactionId | None) -> int:
    """Data keys of ``uuid`` other than the final committed versions."""
    n = 0
    for sk in storage.list_prefix(DATA_PREFIX):
        _, tid = decode_data_key(sk)
        if tid.uuid == uuid and (is_provisional(tid) or tid != final):
            n += 1
    return n


def inject_crash(plan: CrashPlan, cluster, rng: random.Random | None = None,
                 n_keys: int = 4, value_size: int = 64, warmup: int = 3) -> CrashReport:
    """Run one victim transaction into the plan's crash and check the aftermath.

    The cluster must be driven manually (no background loops). For
    ``during_spill`` the victim writes values larger than the cluster's spill
    threshold so the buffer spills before commit.
    """
    rng = rng or random.Random()
    plan = plan.resolve(rng)
    report = CrashReport(plan)
    n_nodes = len(cluster.managers)
    victim = plan.node
    other = (victim + 1) % n_nodes
    keys = [f"c{i}" for i in rng.sample(range(64), n_keys)]

    # Older versions of every key so partial visibility would show up.
    for _ in range(warmup):
        node = cluster.node(other)
        h = node.start_transaction()
        for k in keys:
            node.put(h, k, encode_value(ValueTag(h.uuid, k, 1), value_size))
        node.commit_transaction(h)
    cluster.settle()
    # Node clocks are independent; step past the warmup's timestamps so the
    # victim is the newest writer of its keys.
    time.sleep(0.003)

    node = cluster.node(victim)
    injector = CrashInjector(plan, node).install()
    if plan.point == "during_spill":
        size = node.buffer.spill_threshold + 1
    else:
        size = value_size
    h = node.start_transaction()
    uuid = report.uuid = h.uuid
    values = {k: encode_value(ValueTag(uuid, k, 1), size) for k in keys}
    try:
        for k in keys:
            node.put(h, k, values[k])
        report.acked_tid = node.commit_transaction(h)
    except AftError:
        pass
    report.fired = injector.fired
    if not report.fired:
        node.crash_hook = None
        return report

    # Recovery: restart the victim, let the fault manager scan, multicast.
    cluster.restart(victim)
    cluster.fault_scan()
    cluster.settle()

    def check_all(stage: str) -> set[int]:
        counts = set()
        for i in cluster.alive():
            seen = _visible_count(cluster.node(i), keys, uuid)
            counts.add(seen)
            if 0 < seen < len(keys):
                report.partial_visibility += 1
                report.notes.append(f"{stage}: node {i} saw {seen}/{len(keys)} versions")
        return counts

    before = check_all("after recovery")
    report.visible_before_retry = before == {len(keys)}
    committed = bool(_commit_records_for(cluster.storage, uuid))
    if committed and not report.visible_before_retry:
        report.notes.append("committed transaction not visible after recovery")
    if not committed and before != {0}:
        report.notes.append("uncommitted transaction visible")
    if report.acked_tid is not None and not committed:
        report.notes.append("acknowledged commit lost")

    # The client retries under the same uuid on a surviving node.
    retry_node = cluster.node(other)
    h2 = retry_node.start_transaction(uuid)
    for k in keys:
        retry_node.put(h2, k, values[k])
    report.retry_tid = retry_node.commit_transaction(h2)
    if report.acked_tid is not None and report.retry_tid != report.acked_tid:
        report.notes.append("retry produced a second commit id")
    cluster.settle()
    after = check_all("after retry")
    if after != {len(keys)}:
        report.notes.append(f"retried write set not fully visible: {sorted(after)}")
    report.commit_records = len(_commit_records_for(cluster.storage, uuid))

    # Orphans from the crashed attempt go once they age out.
    coord = cluster.coordinator
    coord.orphan_sweep(now=0.0)
    coord.orphan_sweep(now=coord.orphan_age + 1.0)
    report.leftover_keys = _leftovers(cluster.storage, uuid, report.retry_tid)
    return report
