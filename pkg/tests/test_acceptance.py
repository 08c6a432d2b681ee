"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line through the ``criterion`` fixture; the
lines are printed as they happen and again in the terminal summary.
"""

from __future__ import annotations

import json
import random
import signal
import statistics
import subprocess
import sys
import time
from pathlib import Path

from aft.core import NULL_VERSION, CommitRecord, LogicalClock, TransactionId
from aft.harness.anomalies import count_anomalies, wrong_value_reads
from aft.harness.cluster import Cluster, LoopbackCluster, RemoteDeployment, wait_until
from aft.harness.crash import CRASH_POINTS, CrashInjector, CrashPlan, inject_crash
from aft.harness.oracle import oracle_atomic_read
from aft.harness.workload import WorkloadSpec, key_name, run_workload
from aft.index import CommitIndex, ReadEntry, atomic_read
from aft.server import AftClient
from aft.storage import MemoryBackend

from invariants import PROPERTIES, build

HERE = Path(__file__).parent


# -- 1: oracle equivalence ---------------------------------------------------------


def _random_case(rng: random.Random):
    """A history of up to 50 commits over up to 8 keys, an atomic read set
    assembled one key at a time from valid versions (or NULL), and a key
    outside the read set to look up."""
    universe = "abcdefgh"[: rng.randint(1, 8)]
    history = []
    for i in range(rng.randint(0, 50)):
        ws = frozenset(rng.sample(universe, rng.randint(1, len(universe))))
        history.append(CommitRecord(TransactionId(rng.randint(1, 60), f"{i:032x}"), ws))
    key = rng.choice(universe)
    others = [k for k in universe if k != key]
    entries: dict[str, ReadEntry] = {}
    for k in rng.sample(others, rng.randint(0, len(others))):
        options = [ReadEntry(r.tid, r.writeset) for r in history if k in r.writeset
                   and all(r.tid >= e.tid for e in entries.values() if k in e.cowritten)
                   and all(entries[j].tid >= r.tid for j in r.writeset if j in entries)]
        if not any(k in e.cowritten for e in entries.values()):
            options.append(ReadEntry(NULL_VERSION, frozenset((k,))))
        if options:
            entries[k] = rng.choice(options)
    return key, entries, history


def test_oracle_equivalence(criterion):
    rng = random.Random(20240601)
    start = time.monotonic()
    mismatches = 0
    for _ in range(10_000):
        key, entries, history = _random_case(rng)
        index = CommitIndex()
        for rec in history:
            index.insert(rec)
        if atomic_read(key, entries, index) != oracle_atomic_read(key, entries, history):
            mismatches += 1
    elapsed = time.monotonic() - start
    ok = mismatches == 0 and elapsed < 60
    criterion(1, "oracle equivalence", ok,
              f"{mismatches} mismatches in 10000 cases, {elapsed:.1f}s")
    assert mismatches == 0
    assert elapsed < 60


# -- 2: anomaly prevention ------------------------------------------------------------


def test_anomaly_prevention(criterion):
    storage = MemoryBackend(latency=(0.2, 1.0), seed=42)
    counts = {}
    for mode in ("bypass", "shim"):
        spec = WorkloadSpec(10, 1000, hops=2, reads_per_hop=2, writes_per_hop=1,
                            keyspace=1000, zipf=1.0, mode=mode, seed=42)
        with LoopbackCluster(3, storage) as c:
            c.start_background()
            counts[mode] = count_anomalies(run_workload(spec, c).log)
    shim, bypass = counts["shim"], counts["bypass"]
    ok = (shim.ryw, shim.fr) == (0, 0) and bypass.ryw > 0 and bypass.fr > 0
    criterion(2, "anomaly prevention", ok,
              f"shim RYW={shim.ryw} FR={shim.fr}; bypass RYW={bypass.ryw} FR={bypass.fr}")
    assert (shim.ryw, shim.fr) == (0, 0)
    assert bypass.ryw > 0 and bypass.fr > 0


# -- 3: crash matrix ----------------------------------------------------------------------


def test_crash_matrix(criterion):
    failures = []
    partial = 0
    for point in CRASH_POINTS:
        for trial in range(25):
            storage = MemoryBackend(per_entry=trial % 2 == 1)
            with Cluster(3, storage, spill_threshold=256, seed=trial) as c:
                rep = inject_crash(CrashPlan(trial % 3, point), c, random.Random(trial))
            partial += rep.partial_visibility
            if rep.verdict != "pass":
                failures.append((point, trial, rep.verdict, rep.commit_records, rep.notes))
    ok = not failures and partial == 0
    criterion(3, "crash matrix", ok,
              f"{4 * 25 - len(failures)}/100 trials clean, {partial} partial views")
    assert not failures, failures[:5]


# -- 4: fault-manager liveness ----------------------------------------------------------


def _serves(node, keys, tid) -> bool:
    h = node.start_transaction()
    try:
        return all(node.get_version(h, k).tid == tid for k in keys)
    finally:
        node.abort_transaction(h)


def test_fault_manager_liveness(criterion):
    waits = []
    for trial in range(10):
        with Cluster(3, seed=trial) as c:
            c.start_background()
            victim = c.node(0)
            CrashInjector(CrashPlan(0, "after_ack_before_broadcast"), victim).install()
            keys = [f"live{trial}-{i}" for i in range(3)]
            h = victim.start_transaction()
            for k in keys:
                victim.put(h, k, b"v")
            tid = victim.commit_transaction(h)
            assert not victim.alive
            waits.append(wait_until(
                lambda: all(_serves(c.node(i), keys, tid) for i in (1, 2)), timeout=10.0))
    passed = sum(w is not None for w in waits)
    slowest = max((w for w in waits if w is not None), default=0.0)
    criterion(4, "fault-manager liveness", passed == 10,
              f"{passed}/10 trials, slowest {slowest:.1f}s")
    assert passed == 10


# -- 5: pruning equivalence --------------------------------------------------------------


def _replay(prune: bool, spec: WorkloadSpec, seed: int) -> list:
    with Cluster(3, clock="logical", seed=seed, prune=prune) as c:
        def step(n):
            if n % 20 == 0:
                c.tick()
        run_workload(spec, c, threads=False, scheduler_seed=seed, on_step=step,
                     clock=LogicalClock())
        c.settle(3)
        keys = sorted(key_name(r) for r in range(spec.keyspace))
        answers = []
        for i, m in enumerate(c.managers):
            h = m.start_transaction()
            answers += [(i, "txn", k, m.get_version(h, k).tid) for k in keys]
            m.abort_transaction(h)
            for k in keys:
                h = m.start_transaction()
                answers.append((i, "fresh", k, m.get_version(h, k).tid))
                m.abort_transaction(h)
    return answers


def test_pruning_equivalence(criterion):
    spec = WorkloadSpec(10, 500, keyspace=200, seed=17, on_unreadable="skip")
    pruned = _replay(True, spec, 17)
    unpruned = _replay(False, spec, 17)
    differ = sum(a != b for a, b in zip(pruned, unpruned))
    ok = len(pruned) == len(unpruned) and differ == 0
    versions = sum(a[3] is not None for a in pruned)
    criterion(5, "pruning equivalence", ok,
              f"{len(pruned)} answers ({versions} non-NULL), {differ} differ")
    assert len(pruned) == len(unpruned)
    assert differ == 0


# -- 6: GC safety and effect ------------------------------------------------------------------


def _gc_run(mode: str, seconds: float = 60.0, seed: int = 11) -> dict:
    out = subprocess.run([sys.executable, str(HERE / "gc_bench.py"), str(seconds), mode,
                          str(seed)], capture_output=True, text=True, check=True,
                         timeout=seconds + 180)
    return json.loads(out.stdout.strip().splitlines()[-1])


def test_gc_safety_and_effect(criterion):
    off = _gc_run("off")
    on = _gc_run("on")
    samples = on["samples"]
    steady = statistics.median(samples[len(samples) // 4:])
    safe = on["wrong_value_reads"] == 0 and on["ryw"] == 0 and on["fr"] == 0
    plateau = on["final_records"] < 2 * steady
    ratio = on["tps"] / off["tps"]
    ok = safe and plateau and ratio >= 0.85
    criterion(6, "GC safety and effect", ok,
              f"wrong={on['wrong_value_reads']} RYW={on['ryw']} FR={on['fr']}; "
              f"records final={on['final_records']} median={steady:.0f} "
              f"(GC off final={off['final_records']}); "
              f"tps on={on['tps']:.0f} off={off['tps']:.0f} ratio={ratio:.2f}")
    assert safe
    assert plateau
    assert ratio >= 0.85


# -- 7: restart recovery ---------------------------------------------------------------------

NODE_CMD = [sys.executable, "-c", "import sys; from aft.cli import node_main; sys.exit(node_main())"]


def _spawn(config: Path):
    proc = subprocess.Popen(NODE_CMD + ["--config", str(config)], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    if "listening on" not in line:
        proc.kill()
        raise AssertionError(f"node did not start: {line!r} {proc.stderr.read()}")
    host, port = line.rsplit(" ", 1)[1].strip().rsplit(":", 1)
    return proc, f"{host}:{port}"


def test_restart_recovery(criterion, tmp_path):
    config = tmp_path / "node.toml"
    config.write_text(f'node_id = "solo"\nlisten = "127.0.0.1:0"\nbootstrap_limit = 5000\n'
                      f'[backend]\nkind = "file"\nroot_path = "{tmp_path / "store"}"\n')
    proc, addr = _spawn(config)
    committed = {}
    try:
        c = AftClient(addr)
        for i in range(1000):
            h = c.start_transaction()
            c.put(h, f"a{i}", f"a{i}".encode())
            c.put(h, f"b{i}", f"b{i}".encode())
            committed[i] = c.commit_transaction(h)
        c.close()
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait()

    proc, addr = _spawn(config)
    try:
        c = AftClient(addr)
        warm = c.stats()["records"]
        missing = 0
        h = c.start_transaction()
        for i, tid in committed.items():
            for k in (f"a{i}", f"b{i}"):
                r = c.get_version(h, k)
                if r.tid != tid or r.value != k.encode():
                    missing += 1
        c.abort_transaction(h)
        c.close()
        dep = RemoteDeployment(None, [addr])
        result = run_workload(WorkloadSpec(5, 100, keyspace=50, seed=7), dep)
        dep.close()
        counts = count_anomalies(result.log)
        wrong = wrong_value_reads(result.log)
    finally:
        proc.send_signal(signal.SIGTERM)
        proc.wait(timeout=10)
    ok = missing == 0 and warm == 1000 and (counts.ryw, counts.fr, wrong) == (0, 0, 0)
    criterion(7, "restart recovery", ok,
              f"{missing} unreadable versions, {warm} records indexed at startup, "
              f"follow-up RYW={counts.ryw} FR={counts.fr} wrong={wrong}")
    assert missing == 0
    assert warm == 1000
    assert (counts.ryw, counts.fr, wrong) == (0, 0, 0)


# -- 8: invariant suite ------------------------------------------------------------------------


def test_invariant_suite(criterion):
    failed = {}
    for name in sorted(PROPERTIES):
        try:
            build(name, max_examples=1000)()
        except Exception as e:  # noqa: BLE001
            failed[name] = f"{type(e).__name__}: {e}"[:300]
    criterion(8, "invariant suite", not failed,
              f"{len(PROPERTIES) - len(failed)}/{len(PROPERTIES)} properties at 1000 cases")
    assert not failed, failed
