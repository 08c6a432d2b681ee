"""Test clusters: several nodes and a coordinator over one shared store.

``Cluster`` wires everything in-process and can be driven by explicit ticks
(deterministic) or by the same background loops the servers use.
``LoopbackCluster`` additionally serves every node and the coordinator over
TCP on 127.0.0.1 so clients and peers talk through the wire protocol.
"""

from __future__ import annotations

import time
from typing import Callable

from ..core import AftError, NodeUnavailable, SeededUuids, make_clock, random_uuid
from ..fault_manager import Coordinator
from ..server import (
    AftClient,
    CoordinatorService,
    FrameServer,
    NodeService,
    RemoteError,
    RemoteNode,
)
from ..storage import Backend, MemoryBackend
from ..txn import TransactionManager


class LocalPeer:
    """In-process stand-in for an ``AftClient`` pointed at a service."""

    def __init__(self, lookup: Callable[[], object], name: str):
        self._lookup = lookup
        self.address = name

    def call(self, msg: dict) -> dict:
        resp = self._lookup().handle_request(msg)
        if "error" in resp:
            if resp["error"] == "unavailable":
                raise NodeUnavailable(resp.get("message", ""))
            raise RemoteError(resp["error"], resp.get("message", ""))
        return resp


class NodeProxy:
    """Stable handle on cluster slot ``i``; survives crash and restart."""

    def __init__(self, cluster: "Cluster", i: int):
        self._cluster = cluster
        self._i = i

    def __getattr__(self, name):
        return getattr(self._cluster.managers[self._i], name)


class Cluster:
    def __init__(self, n_nodes: int = 3, storage: Backend | None = None, *,
                 clock: str = "system", seed: int | None = None, prune: bool = True,
                 local_gc: bool = True, spill_threshold: int = 4 << 20,
                 txn_timeout: float = 60.0, cache_bytes: int = 64 << 20,
                 orphan_age: float = 600.0, deletion_workers: int = 1,
                 bootstrap_limit: int = 10_000, check_reads: bool = False,
                 multicast_interval: float = 1.0, gc_interval: float = 5.0,
                 fault_scan_interval: float = 5.0, gc_enabled: bool = True):
        self.storage = storage if storage is not None else MemoryBackend()
        self.clock_mode = clock
        self.seed = seed
        self.prune = prune
        self.local_gc = local_gc
        self._node_kw = dict(spill_threshold=spill_threshold, txn_timeout=txn_timeout,
                             cache_bytes=cache_bytes, bootstrap_limit=bootstrap_limit,
                             check_reads=check_reads)
        self.multicast_interval = multicast_interval
        self.gc_interval = gc_interval
        self.fault_scan_interval = fault_scan_interval
        self.gc_enabled = gc_enabled
        self.node_ids = [f"node-{i}" for i in range(n_nodes)]
        self._generation = [0] * n_nodes
        self.managers = [self._make_manager(i) for i in range(n_nodes)]
        self.proxies = [NodeProxy(self, i) for i in range(n_nodes)]
        self.coordinator = Coordinator(self.storage, self._coordinator_handles(),
                                       deletion_workers=deletion_workers, orphan_age=orphan_age)
        self.coordinator_service = CoordinatorService(
            self.coordinator, gc_interval=gc_interval, fault_scan_interval=fault_scan_interval,
            gc_enabled=gc_enabled)
        self.services = [self._make_service(i) for i in range(n_nodes)]
        self._background = False

    # -- construction hooks ---------------------------------------------------

    def _make_manager(self, i: int) -> TransactionManager:
        if self.seed is not None:
            uuids = SeededUuids(self.seed * 7919 + i * 101 + self._generation[i])
        else:
            uuids = random_uuid
        return TransactionManager(self.storage, self.node_ids[i],
                                  clock=make_clock(self.clock_mode), uuid_source=uuids,
                                  **self._node_kw)

    def _coordinator_handles(self) -> list:
        return list(self.proxies)

    def _peer(self, j: int):
        return LocalPeer(lambda: self.services[j], self.node_ids[j])

    def _coordinator_link(self):
        return LocalPeer(lambda: self.coordinator_service, "coordinator")

    def _make_service(self, i: int) -> NodeService:
        peers = [self._peer(j) for j in range(len(self.managers)) if j != i]
        return NodeService(self.managers[i], peers, self._coordinator_link(),
                           multicast_interval=self.multicast_interval,
                           gc_interval=self.gc_interval, prune=self.prune,
                           local_gc=self.local_gc)

    # -- client access -------------------------------------------------------

    def endpoints(self, client: int) -> list:
        return list(self.proxies)

    def node(self, i: int) -> TransactionManager:
        return self.managers[i]

    def alive(self) -> list[int]:
        return [i for i, m in enumerate(self.managers) if m.alive]

    # -- manual driving --------------------------------------------------------

    def tick(self) -> None:
        """One multicast round from every live node."""
        for i in self.alive():
            try:
                self.services[i].broadcast_once()
            except NodeUnavailable:
                pass

    def settle(self, rounds: int = 2) -> None:
        for _ in range(rounds):
            self.tick()

    def housekeeping(self) -> None:
        for i in self.alive():
            try:
                self.services[i].housekeeping()
            except NodeUnavailable:
                pass

    def gc_round(self, wait: bool = True):
        return self.coordinator.global_gc_round(wait_for_deletes=wait)

    def fault_scan(self):
        return self.coordinator.fault_scan()

    # -- failures ----------------------------------------------------------------

    def crash(self, i: int) -> None:
        self.managers[i].crash()

    def restart(self, i: int) -> int:
        """Replace node ``i`` with a fresh process image and bootstrap it."""
        self.managers[i].crash()
        self._generation[i] += 1
        fresh = self._make_manager(i)
        loaded = fresh.bootstrap()
        self.managers[i] = fresh
        self.services[i].manager = fresh
        return loaded

    # -- background mode -------------------------------------------------------

    def start_background(self) -> None:
        for s in self.services:
            s.start_background()
        self.coordinator_service.start_background()
        self._background = True

    def stop(self) -> None:
        if self._background:
            for s in self.services:
                s.stop()
            self.coordinator_service.stop()
            self._background = False
        self.coordinator.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


class LoopbackCluster(Cluster):
    """Nodes and coordinator behind real TCP servers on 127.0.0.1."""

    def __init__(self, n_nodes: int = 3, storage: Backend | None = None, **kw):
        self.servers: list[FrameServer] = []
        self._clients: dict[int, list[AftClient]] = {}
        self._n = n_nodes
        self._ports: list[int] = []
        super().__init__(n_nodes, storage, **kw)
        # Servers start once every service exists; peers connect lazily.
        for svc in self.services:
            srv = FrameServer(("127.0.0.1", 0), svc)
            srv.serve_in_thread()
            self.servers.append(srv)
            self._ports.append(srv.port)
        self.coordinator_server = FrameServer(("127.0.0.1", 0), self.coordinator_service)
        self.coordinator_server.serve_in_thread()
        self.coordinator.nodes = [RemoteNode(self.node_ids[i], self.address(i))
                                  for i in range(n_nodes)]

    def address(self, i: int) -> tuple[str, int]:
        return ("127.0.0.1", self._ports[i])

    def _coordinator_handles(self) -> list:
        return []

    def _peer(self, j: int):
        cluster = self

        class _Lazy:
            address = cluster.node_ids[j]
            _client: AftClient | None = None

            def call(self, msg):
                if self._client is None:
                    self._client = AftClient(cluster.address(j), timeout=10.0)
                return self._client.call(msg)

        return _Lazy()

    def _coordinator_link(self):
        cluster = self

        class _Lazy:
            address = "coordinator"
            _client: AftClient | None = None

            def call(self, msg):
                if self._client is None:
                    self._client = AftClient(cluster.coordinator_server.server_address,
                                             timeout=10.0)
                return self._client.call(msg)

        return _Lazy()

    def endpoints(self, client: int) -> list[AftClient]:
        if client not in self._clients:
            self._clients[client] = [AftClient(self.address(i)) for i in range(self._n)]
        return self._clients[client]

    def stop(self) -> None:
        super().stop()
        for clients in self._clients.values():
            for c in clients:
                c.close()
        for srv in self.servers + [self.coordinator_server]:
            srv.shutdown()
            srv.server_close()


def wait_until(pred: Callable[[], bool], timeout: float, interval: float = 0.05) -> float | None:
    """Seconds until ``pred`` held, or None on timeout."""
    start = time.monotonic()
    while True:
        try:
            if pred():
                return time.monotonic() - start
        except AftError:
            pass
        if time.monotonic() - start > timeout:
            return None
        time.sleep(interval)


class RemoteDeployment:
    """Already-running nodes reached over TCP, plus direct store access."""

    def __init__(self, storage: Backend, addresses: list[str]):
        self.storage = storage
        self.addresses = addresses
        self._clients: dict[int, list[AftClient]] = {}

    def endpoints(self, client: int) -> list[AftClient]:
        if client not in self._clients:
            self._clients[client] = [AftClient(a) for a in self.addresses]
        return self._clients[client]

    def close(self) -> None:
        for clients in self._clients.values():
            for c in clients:
                c.close()
