"""Node and coordinator runtimes, their TCP servers, and clients.

Every request frame carries ``type`` and ``req_id``; every response echoes
the ``req_id`` and carries either result fields or ``error`` (one of
``unknown_txn``, ``not_running``, ``not_readable``, ``storage_error``,
``protocol_error``, ``bad_request``, ``unavailable``) plus ``message``.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from typing import Callable

from .core import (
    AftError,
    CommitRecord,
    NodeUnavailable,
    NotReadable,
    NotRunning,
    PendingTxnHandle,
    StorageError,
    TransactionId,
    UnknownTransaction,
)
from .fault_manager import Coordinator, GcAck, GcCandidateSet, local_gc_sweep
from .replication import CommitBatch, collect_broadcast, merge_remote
from .txn import TransactionManager
from .wire import ProtocolError, b64, encode_frame, read_frame, unb64

log = logging.getLogger(__name__)

ERRORS: dict[str, type[AftError]] = {
    "unknown_txn": UnknownTransaction,
    "not_running": NotRunning,
    "not_readable": NotReadable,
    "storage_error": StorageError,
    "unavailable": NodeUnavailable,
}


class RemoteError(AftError):
    """Error response without a more specific local exception type."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def error_response(req_id, code: str, message: str) -> dict:
    return {"req_id": req_id, "error": code, "message": message}


def _dispatch(handlers: dict[str, Callable[[dict], dict]], msg: dict) -> dict:
    req_id = msg.get("req_id")
    kind = msg.get("type")
    handler = handlers.get(kind) if isinstance(kind, str) else None
    if handler is None:
        return error_response(req_id, "protocol_error", f"unknown message type {kind!r}")
    try:
        out = handler(msg)
    except AftError as e:
        return error_response(req_id, e.code, str(e))
    except (KeyError, TypeError, ProtocolError) as e:
        return error_response(req_id, "protocol_error", f"malformed {kind}: {e}")
    except ValueError as e:
        return error_response(req_id, "bad_request", str(e))
    out["req_id"] = req_id
    return out


# -- node runtime ---------------------------------------------------------------

class NodeService:
    """A transaction manager plus its background multicast and GC duties."""

    def __init__(self, manager: TransactionManager, peers: list["AftClient"] | None = None,
                 coordinator: "AftClient | None" = None, multicast_interval: float = 1.0,
                 gc_interval: float = 5.0, prune: bool = True, local_gc: bool = True):
        self.manager = manager
        self.peers = peers or []
        self.coordinator = coordinator
        self.multicast_interval = multicast_interval
        self.gc_interval = gc_interval
        self.prune = prune
        self.local_gc = local_gc
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.handlers = {
            "start": self._start, "get": self._get, "put": self._put,
            "commit": self._commit, "abort": self._abort,
            "commit_batch": self._commit_batch, "gc_candidates": self._gc_candidates,
            "fault_notify": self._fault_notify, "live_uuids": self._live_uuids,
            "stats": self._stats, "ping": lambda m: {"ok": True},
        }

    def handle_request(self, msg: dict) -> dict:
        return _dispatch(self.handlers, msg)

    def _start(self, m):
        h = self.manager.start_transaction(m.get("uuid"))
        return {"uuid": h.uuid}

    def _get(self, m):
        r = self.manager.get_version(m["uuid"], m["key"])
        return {"value": b64(r.value), "tid": r.tid.to_json() if r.tid else None,
                "own": r.own_write}

    def _put(self, m):
        value = unb64(m["value"])
        if value is None:
            raise ValueError("put needs a value")
        self.manager.put(m["uuid"], m["key"], value)
        return {"ok": True}

    def _commit(self, m):
        tid = self.manager.commit_transaction(m["uuid"])
        return {"ts": tid.timestamp, "uuid": tid.uuid}

    def _abort(self, m):
        self.manager.abort_transaction(m["uuid"])
        return {"ok": True}

    def _commit_batch(self, m):
        return {"merged": merge_remote(CommitBatch.from_message(m), self.manager)}

    def _gc_candidates(self, m):
        cands = GcCandidateSet.from_message(m)
        return self.manager.gc_candidates(cands).to_message(cands)

    def _fault_notify(self, m):
        recs = [CommitRecord.from_json(r) for r in m["records"]]
        return {"merged": self.manager.fault_notify(recs)}

    def _live_uuids(self, m):
        return {"uuids": sorted(self.manager.live_uuids())}

    def _stats(self, m):
        return self.manager.describe()

    # background duties

    def broadcast_once(self) -> CommitBatch:
        batch, unpruned = collect_broadcast(self.manager, prune=self.prune)
        msg = batch.to_message()
        for peer in self.peers:
            try:
                peer.call(dict(msg))
            except (AftError, OSError) as e:
                log.debug("commit batch to %s lost: %s", peer.address, e)
        if self.coordinator is not None and unpruned:
            full = CommitBatch(batch.origin, tuple(unpruned), batch.sequence).to_message()
            try:
                self.coordinator.call(full)
            except (AftError, OSError) as e:
                log.debug("commit feed to coordinator lost: %s", e)
        return batch

    def housekeeping(self) -> None:
        if self.local_gc:
            local_gc_sweep(self.manager)
        self.manager.expire_stale_sessions()
        try:
            self.manager.flush_garbage()
        except StorageError as e:
            log.warning("garbage flush failed: %s", e)

    def _loop(self) -> None:
        next_cast = time.monotonic() + self.multicast_interval
        next_gc = time.monotonic() + self.gc_interval
        while not self._stop.is_set():
            wake = min(next_cast, next_gc)
            if self._stop.wait(max(0.0, wake - time.monotonic())):
                break
            now = time.monotonic()
            try:
                if now >= next_cast:
                    next_cast = now + self.multicast_interval
                    self.broadcast_once()
                if now >= next_gc:
                    next_gc = now + self.gc_interval
                    self.housekeeping()
            except NodeUnavailable:
                continue
            except Exception:
                log.exception("node background task failed")

    def start_background(self) -> None:
        self._thread = threading.Thread(target=self._loop, name=f"aft-{self.manager.node_id}",
                                        daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


# -- coordinator runtime -------------------------------------------------------

class CoordinatorService:
    def __init__(self, coordinator: Coordinator, gc_interval: float = 5.0,
                 fault_scan_interval: float = 5.0, gc_enabled: bool = True,
                 orphan_interval: float | None = None):
        self.coordinator = coordinator
        self.gc_interval = gc_interval
        self.fault_scan_interval = fault_scan_interval
        # Orphans only go after orphan_age, so looking far more often is wasted work.
        self.orphan_interval = orphan_interval or max(gc_interval, coordinator.orphan_age / 10)
        self.gc_enabled = gc_enabled
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.handlers = {
            "commit_batch": self._commit_batch,
            "stats": lambda m: vars(self.coordinator.stats).copy(),
            "ping": lambda m: {"ok": True},
        }

    def handle_request(self, msg: dict) -> dict:
        return _dispatch(self.handlers, msg)

    def _commit_batch(self, m):
        batch = CommitBatch.from_message(m)
        self.coordinator.receive_commits(batch.records)
        return {"received": len(batch.records)}

    def _every(self, interval: float, fn: Callable[[], object]) -> None:
        while not self._stop.wait(interval):
            try:
                fn()
            except Exception:
                log.exception("coordinator task %s failed", getattr(fn, "__name__", fn))

    def start_background(self) -> None:
        tasks = [(self.fault_scan_interval, self.coordinator.fault_scan)]
        if self.gc_enabled:
            tasks.append((self.gc_interval, self.coordinator.global_gc_round))
            tasks.append((self.orphan_interval, self.coordinator.orphan_sweep))
        for interval, fn in tasks:
            t = threading.Thread(target=self._every, args=(interval, fn), daemon=True,
                                 name=f"aft-coord-{fn.__name__}")
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join()
        self.coordinator.drain()


# -- TCP plumbing ---------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        service = self.server.service
        while True:
            try:
                msg = read_frame(sock)
            except ProtocolError as e:
                resp = error_response(None, "protocol_error", str(e))
                try:
                    sock.sendall(encode_frame(resp))
                except OSError:
                    return
                if e.fatal:
                    return
                continue
            except OSError:
                return
            if msg is None:
                return
            resp = service.handle_request(msg)
            try:
                sock.sendall(encode_frame(resp))
            except OSError:
                return


class FrameServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service):
        self.service = service
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def serve_in_thread(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True, name="aft-server")
        t.start()
        return t


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


# -- clients ----------------------------------------------------------------------

class AftClient:
    """Blocking client; one request in flight per client object."""

    def __init__(self, address: str | tuple[str, int], timeout: float = 30.0):
        self.address = parse_address(address) if isinstance(address, str) else address
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        self._next_id = 0

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                s = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as e:
                raise NodeUnavailable(f"cannot reach {self.address}: {e}") from e
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = s
        return self._sock

    def close(self) -> None:
        with self._lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None

    def call(self, msg: dict) -> dict:
        """Send one request and return the response; errors become exceptions."""
        with self._lock:
            self._next_id += 1
            msg["req_id"] = self._next_id
            sock = self._connect()
            try:
                sock.sendall(encode_frame(msg))
                resp = read_frame(sock)
            except (OSError, ProtocolError) as e:
                self._sock = None
                sock.close()
                raise NodeUnavailable(f"connection to {self.address} failed: {e}") from e
            if resp is None:
                self._sock = None
                sock.close()
                raise NodeUnavailable(f"{self.address} closed the connection")
        if resp.get("req_id") != msg["req_id"]:
            raise RemoteError("protocol_error", "response id mismatch")
        code = resp.get("error")
        if code is not None:
            exc = ERRORS.get(code)
            if exc is not None:
                raise exc(resp.get("message", code))
            raise RemoteError(code, resp.get("message", code))
        return resp

    # Client API, mirroring TransactionManager

    def start_transaction(self, uuid: str | None = None) -> PendingTxnHandle:
        msg = {"type": "start"}
        if uuid is not None:
            msg["uuid"] = uuid
        return PendingTxnHandle(self.call(msg)["uuid"], time.monotonic())

    def get_version(self, txid, key: str):
        from .txn import ReadResult

        resp = self.call({"type": "get", "uuid": getattr(txid, "uuid", txid), "key": key})
        tid = TransactionId.from_json(resp["tid"]) if resp.get("tid") else None
        return ReadResult(unb64(resp["value"]), tid, bool(resp.get("own")))

    def get(self, txid, key: str) -> bytes | None:
        return self.get_version(txid, key).value

    def put(self, txid, key: str, value: bytes) -> None:
        self.call({"type": "put", "uuid": getattr(txid, "uuid", txid), "key": key,
                   "value": b64(value)})

    def commit_transaction(self, txid) -> TransactionId:
        resp = self.call({"type": "commit", "uuid": getattr(txid, "uuid", txid)})
        return TransactionId(resp["ts"], resp["uuid"])

    def abort_transaction(self, txid) -> None:
        self.call({"type": "abort", "uuid": getattr(txid, "uuid", txid)})

    def stats(self) -> dict:
        return self.call({"type": "stats"})


class RemoteNode:
    """Coordinator-side handle on a node reached over TCP."""

    def __init__(self, node_id: str, address: str | tuple[str, int], timeout: float = 10.0):
        self.node_id = node_id
        self.client = AftClient(address, timeout)

    def gc_candidates(self, cands: GcCandidateSet) -> GcAck:
        resp = self.client.call(cands.to_message())
        ack = GcAck.from_message(resp, cands)
        return GcAck(self.node_id, ack.round, ack.deleted)

    def fault_notify(self, records: list[CommitRecord]) -> int:
        resp = self.client.call({"type": "fault_notify",
                                 "records": [r.to_json() for r in records]})
        return int(resp["merged"])

    def live_uuids(self) -> set[str]:
        return set(self.client.call({"type": "live_uuids"})["uuids"])
