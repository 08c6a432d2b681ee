"""Node and coordinator configuration files.

Files are TOML. Keys are flat ``name = value`` pairs; backend settings may be
given as a ``[backend]`` table or as dotted ``backend.kind = ...`` keys.
Peers and nodes are written ``"id@host:port"``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields

from .storage import BackendConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Peer:
    node_id: str
    address: str

    @classmethod
    def parse(cls, text: str) -> "Peer":
        node_id, sep, address = text.partition("@")
        if not sep or not node_id or ":" not in address:
            raise ConfigError(f"peer must be id@host:port, got {text!r}")
        return cls(node_id, address)


@dataclass
class NodeConfig:
    node_id: str
    listen: str = "127.0.0.1:7000"
    peers: list[Peer] = field(default_factory=list)
    coordinator: str | None = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    multicast_interval: float = 1.0
    gc_interval: float = 5.0
    fault_scan_interval: float = 5.0
    txn_timeout: float = 60.0
    cache_bytes: int = 64 << 20
    spill_threshold: int = 4 << 20
    bootstrap_limit: int = 10_000
    clock: str = "system"
    prune: bool = True

    def validate(self) -> None:
        if not self.node_id:
            raise ConfigError("node_id is required")
        ids = [p.node_id for p in self.peers]
        if self.node_id in ids or len(ids) != len(set(ids)):
            raise ConfigError("node ids must be unique across node_id and peers")
        for name in ("multicast_interval", "gc_interval", "fault_scan_interval", "txn_timeout"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.clock not in ("system", "logical"):
            raise ConfigError(f"clock must be system or logical, got {self.clock!r}")
        if self.spill_threshold <= 0 or self.cache_bytes < 0:
            raise ConfigError("spill_threshold must be positive and cache_bytes non-negative")
        _check_backend(self.backend)


@dataclass
class CoordinatorConfig:
    listen: str = "127.0.0.1:7100"
    nodes: list[Peer] = field(default_factory=list)
    backend: BackendConfig = field(default_factory=BackendConfig)
    gc_interval: float = 5.0
    fault_scan_interval: float = 5.0
    orphan_age: float = 600.0
    gc_enabled: bool = True
    deletion_workers: int = 1

    def validate(self) -> None:
        ids = [p.node_id for p in self.nodes]
        if len(ids) != len(set(ids)):
            raise ConfigError("node ids must be unique")
        for name in ("gc_interval", "fault_scan_interval", "orphan_age"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.deletion_workers < 1:
            raise ConfigError("deletion_workers must be at least 1")
        _check_backend(self.backend)


@dataclass
class BenchConfig:
    # host:port of running nodes; empty runs an in-process cluster instead.
    addresses: list[str] = field(default_factory=list)
    cluster_size: int = 3
    clients: int = 10
    txns_per_client: int = 1000
    hops: int = 2
    reads_per_hop: int = 2
    writes_per_hop: int = 1
    keyspace: int = 1000
    zipf: float = 1.0
    value_size: int = 64
    mode: str = "shim"
    backend: BackendConfig = field(default_factory=BackendConfig)
    retry_limit: int = 5

    def validate(self) -> None:
        if self.cluster_size < 1:
            raise ConfigError("cluster_size must be at least 1")
        for a in self.addresses:
            if ":" not in a:
                raise ConfigError(f"address must be host:port, got {a!r}")
        _check_backend(self.backend)


def _check_backend(b: BackendConfig) -> None:
    if b.kind not in ("memory", "file"):
        raise ConfigError(f"unknown backend kind {b.kind!r}")
    if b.kind == "file" and not b.root_path:
        raise ConfigError("file backend needs root_path")


def _build(cls, raw: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if name == "backend":
            if not isinstance(value, dict):
                raise ConfigError("backend must be a table")
            value = _build(BackendConfig, value)
        elif name in ("peers", "nodes"):
            if not isinstance(value, list):
                raise ConfigError(f"{name} must be a list")
            value = [Peer.parse(str(v)) for v in value]
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def parse_config(cls, text: str):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid config: {e}") from None
    cfg = _build(cls, raw)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def load_config(cls, path: str):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    return parse_config(cls, text)
