"""Run nodes behind real TCP servers (used by ``fedctl`` and loopback tests)."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .cache import CacheProxy
from .config import build_origin, validate_cache, validate_redirector
from .model import Catalog, CatalogError, NodeInfo, TokenTable
from .origin import Registrar
from .redirector import Redirector
from .transport import NodeServer, SocketTransport

log = logging.getLogger(__name__)


@dataclass
class RunningNode:
    node: Any
    server: NodeServer
    stoppers: list = field(default_factory=list)
    stopped: threading.Event = field(default_factory=threading.Event)
    registrar: Optional[Registrar] = None

    @property
    def endpoint(self) -> str:
        return self.server.endpoint

    def stop(self):
        if self.stopped.is_set():
            return
        for fn in self.stoppers:
            fn()
        self.server.stop()
        self.stopped.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self.stopped.wait(timeout)


def _serve(node, endpoint: str, rate_limit: Optional[float] = None) -> RunningNode:
    holder: dict = {}
    server = NodeServer(endpoint, node.handle, rate_limit_Bps=rate_limit,
                        on_shutdown=lambda: holder["running"].stop())
    running = RunningNode(node, server)
    holder["running"] = running
    server.start()
    return running


class CatalogWatcher:
    """Republishes the origin's catalog when the file on disk changes."""

    def __init__(self, origin, path, interval: float = 2.0):
        self.origin = origin
        self.path = Path(path)
        self.interval = interval
        self._stop = threading.Event()
        self._mtime = self.path.stat().st_mtime_ns if self.path.exists() else None

    def check(self) -> bool:
        try:
            mtime = self.path.stat().st_mtime_ns
        except FileNotFoundError:
            return False
        if mtime == self._mtime:
            return False
        self._mtime = mtime
        try:
            catalog = Catalog.from_bytes(self.path.read_bytes())
        except CatalogError as exc:
            log.error("ignoring unreadable catalog %s: %s", self.path, exc)
            return False
        current = self.origin.current_catalog()
        if current is None or catalog.revision > current.revision:
            self.origin.publish(catalog)
            log.info("serving catalog revision %d", catalog.revision)
            return True
        return False

    def start(self):
        def loop():
            while not self._stop.wait(self.interval):
                self.check()
        threading.Thread(target=loop, name="catalog-watch", daemon=True).start()

    def stop(self):
        self._stop.set()


def start_origin(cfg: dict, transport=None) -> RunningNode:
    origin = build_origin(cfg)
    running = _serve(origin, cfg["listen"], cfg.get("rate_limit_Bps"))
    # port 0 in the config means "pick one"; advertise what we actually bound
    if origin.info.endpoint != running.endpoint:
        origin.info = NodeInfo(origin.node_id, "origin", running.endpoint, origin.info.geo)
    watcher = CatalogWatcher(origin, cfg["catalog"])
    watcher.start()
    running.stoppers.append(watcher.stop)
    if cfg.get("redirector"):
        reg = Registrar(origin, cfg["redirector"], transport or SocketTransport(timeout=5.0),
                        interval=float(cfg.get("heartbeat_seconds", 10.0)))
        reg.start()
        running.stoppers.append(reg.stop)
        running.registrar = reg
    return running


def start_cache(cfg: dict, transport=None) -> RunningNode:
    cfg = validate_cache(cfg)
    cache = CacheProxy(
        cfg["node_id"], cfg["listen"], cfg["geo"], cfg["cache_root"], cfg["capacity_bytes"],
        cfg["cache_token"], transport or SocketTransport(),
        token_table=TokenTable(cfg.get("token_table")), redirector=cfg.get("redirector"),
        origins=cfg.get("origins", []),
        acl_refresh_seconds=float(cfg.get("acl_refresh_seconds", 60)),
    )
    running = _serve(cache, cfg["listen"])
    cache.start_refresher()
    running.stoppers.append(cache.stop)
    return running


def start_redirector(cfg: dict, transport=None) -> RunningNode:
    cfg = validate_redirector(cfg)
    red = Redirector(transport or SocketTransport(timeout=10.0),
                     ttl_seconds=float(cfg.get("ttl_seconds", 30)))
    return _serve(red, cfg["listen"])


STARTERS: dict[str, Callable[..., RunningNode]] = {
    "origin": start_origin,
    "cache": start_cache,
    "redirector": start_redirector,
}
