"""Command-line entry points: aft-node, aft-coordinator, aft-bench.

Exit codes: 0 clean shutdown, 1 bad configuration, 2 bootstrap or bind
failure. ``AFT_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import random
import signal
import sys
import threading

from .config import BenchConfig, ConfigError, CoordinatorConfig, NodeConfig, load_config
from .core import AftError, make_clock
from .fault_manager import Coordinator
from .server import (
    AftClient,
    CoordinatorService,
    FrameServer,
    NodeService,
    RemoteNode,
    parse_address,
)
from .storage import open_backend
from .txn import TransactionManager

EXIT_OK, EXIT_CONFIG, EXIT_STARTUP = 0, 1, 2

log = logging.getLogger("aft")


def _setup_logging() -> None:
    level = os.environ.get("AFT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _wait_for_signal() -> None:
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()


def _load(cls, path: str):
    try:
        return load_config(cls, path)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return None


def node_main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="aft-node", description="Run one shim node.")
    ap.add_argument("--config", required=True)
    args = ap.parse_args(argv)
    _setup_logging()
    cfg = _load(NodeConfig, args.config)
    if cfg is None:
        return EXIT_CONFIG
    try:
        storage = open_backend(cfg.backend)
        manager = TransactionManager(storage, cfg.node_id, clock=make_clock(cfg.clock),
                                     spill_threshold=cfg.spill_threshold,
                                     txn_timeout=cfg.txn_timeout,
                                     bootstrap_limit=cfg.bootstrap_limit,
                                     cache_bytes=cfg.cache_bytes)
        loaded = manager.bootstrap()
    except (AftError, OSError, ValueError) as e:
        print(f"bootstrap failed: {e}", file=sys.stderr)
        return EXIT_STARTUP
    peers = [AftClient(p.address, timeout=10.0) for p in cfg.peers]
    coord = AftClient(cfg.coordinator, timeout=10.0) if cfg.coordinator else None
    service = NodeService(manager, peers, coord, multicast_interval=cfg.multicast_interval,
                          gc_interval=cfg.gc_interval, prune=cfg.prune)
    try:
        server = FrameServer(parse_address(cfg.listen), service)
    except (OSError, ValueError) as e:
        print(f"cannot listen on {cfg.listen}: {e}", file=sys.stderr)
        return EXIT_STARTUP
    log.info("node %s bootstrapped %d records, listening on %s", cfg.node_id, loaded,
             server.server_address)
    print(f"aft-node {cfg.node_id} listening on {server.server_address[0]}:{server.port}",
          flush=True)
    service.start_background()
    server.serve_in_thread()
    _wait_for_signal()
    server.shutdown()
    service.stop()
    storage.close()
    return EXIT_OK


def coordinator_main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="aft-coordinator",
                                 description="Run the fault manager and global GC.")
    ap.add_argument("--config", required=True)
    args = ap.parse_args(argv)
    _setup_logging()
    cfg = _load(CoordinatorConfig, args.config)
    if cfg is None:
        return EXIT_CONFIG
    try:
        storage = open_backend(cfg.backend)
    except (AftError, OSError, ValueError) as e:
        print(f"cannot open storage: {e}", file=sys.stderr)
        return EXIT_STARTUP
    nodes = [RemoteNode(p.node_id, p.address) for p in cfg.nodes]
    coordinator = Coordinator(storage, nodes, deletion_workers=cfg.deletion_workers,
                              orphan_age=cfg.orphan_age)
    service = CoordinatorService(coordinator, gc_interval=cfg.gc_interval,
                                 fault_scan_interval=cfg.fault_scan_interval,
                                 gc_enabled=cfg.gc_enabled)
    try:
        server = FrameServer(parse_address(cfg.listen), service)
    except (OSError, ValueError) as e:
        print(f"cannot listen on {cfg.listen}: {e}", file=sys.stderr)
        return EXIT_STARTUP
    print(f"aft-coordinator listening on {server.server_address[0]}:{server.port}", flush=True)
    service.start_background()
    server.serve_in_thread()
    _wait_for_signal()
    server.shutdown()
    service.stop()
    coordinator.close()
    storage.close()
    return EXIT_OK


def bench_main(argv: list[str] | None = None) -> int:
    from .harness.anomalies import count_anomalies
    from .harness.cluster import Cluster, RemoteDeployment
    from .harness.crash import CrashInjector, CrashPlan
    from .harness.report import report, summary, write_csv
    from .harness.workload import WorkloadSpec, run_workload

    ap = argparse.ArgumentParser(prog="aft-bench", description="Run a workload and report.")
    ap.add_argument("--config", required=True)
    ap.add_argument("--mode", choices=("shim", "bypass"))
    ap.add_argument("--crash", help="crash plan point[@node[#trigger]] (in-process only)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    _setup_logging()
    cfg = _load(BenchConfig, args.config)
    if cfg is None:
        return EXIT_CONFIG
    try:
        spec = WorkloadSpec(cfg.clients, cfg.txns_per_client, cfg.hops, cfg.reads_per_hop,
                            cfg.writes_per_hop, cfg.keyspace, cfg.zipf, cfg.value_size,
                            args.mode or cfg.mode, cfg.retry_limit, args.seed)
        plan = CrashPlan.parse(args.crash) if args.crash else None
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if plan is not None and cfg.addresses:
        print("config error: --crash needs an in-process cluster (no node addresses)",
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        storage = open_backend(cfg.backend)
    except (AftError, OSError, ValueError) as e:
        print(f"cannot open storage: {e}", file=sys.stderr)
        return EXIT_STARTUP

    if cfg.addresses:
        dep = RemoteDeployment(storage, cfg.addresses)
        result = run_workload(spec, dep)
        dep.close()
    else:
        with Cluster(cfg.cluster_size, storage, seed=args.seed) as cluster:
            cluster.start_background()
            injector = None
            if plan is not None:
                plan = plan.resolve(random.Random(args.seed))
                injector = CrashInjector(plan, cluster.node(plan.node)).install()
            result = run_workload(spec, cluster)
            if injector is not None:
                print(f"crash at {plan.point} on node {plan.node}: "
                      f"{'fired' if injector.fired else 'never reached'}")
                if injector.fired:
                    cluster.restart(plan.node)
    counts = count_anomalies(result.log)
    row = report(spec, result.metrics, counts)
    write_csv(args.out, [row])
    print(summary(row))
    storage.close()
    return EXIT_OK
