"""Federation directory: origins subscribe, clients and caches locate."""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from . import wire
from .model import Catalog, CatalogError, NodeInfo, canonical_json, normalize_path

log = logging.getLogger(__name__)

DEFAULT_TTL_SECONDS = 30.0


@dataclass
class Subscription:
    info: NodeInfo
    revision: int
    expires_at: float
    catalog: Optional[Catalog] = None


class Redirector:
    """Keeps a TTL'd table of origins and a copy of each origin's catalog.

    The catalog is fetched from the origin whenever a subscribe carries a
    revision the redirector has not seen for that node.
    """

    def __init__(self, transport=None, ttl_seconds: float = DEFAULT_TTL_SECONDS,
                 clock: Callable[[], float] = time.monotonic):
        self.transport = transport
        self.ttl = ttl_seconds
        self.clock = clock
        self._lock = threading.Lock()
        self.entries: dict[str, Subscription] = {}

    def subscribe(self, info: NodeInfo, revision: int) -> None:
        if info.role != "origin":
            raise ValueError(f"only origins may subscribe, got role {info.role!r}")
        with self._lock:
            prev = self.entries.get(info.node_id)
        catalog = prev.catalog if prev and prev.revision == revision else None
        if catalog is None and self.transport is not None:
            catalog = self._fetch_catalog(info)
        now = self.clock()
        with self._lock:
            self.entries[info.node_id] = Subscription(info, revision, now + self.ttl, catalog)

    def _fetch_catalog(self, info: NodeInfo) -> Optional[Catalog]:
        try:
            resp = self.transport.request(info.endpoint, wire.Request("GET", "/catalog"),
                                          timeout=10.0)
            if resp.status != 200:
                return None
            return Catalog.from_bytes(resp.body)
        except Exception as exc:
            log.warning("could not fetch catalog from %s: %s", info.node_id, exc)
            return None

    def live(self) -> list[Subscription]:
        now = self.clock()
        with self._lock:
            return [s for _, s in sorted(self.entries.items()) if s.expires_at > now]

    def sweep(self) -> int:
        now = self.clock()
        with self._lock:
            dead = [k for k, s in self.entries.items() if s.expires_at <= now]
            for k in dead:
                del self.entries[k]
        return len(dead)

    def locate(self, path: str) -> list[NodeInfo]:
        path = normalize_path(path)
        return [s.info for s in self.live() if s.catalog is not None and path in s.catalog.files]

    def handle(self, req: wire.Request) -> wire.Response:
        if req.method == "POST" and req.path == "/subscribe":
            try:
                body = json.loads(req.body)
                info = NodeInfo.from_json(body)
                revision = int(body["revision"])
                self.subscribe(info, revision)
            except (ValueError, KeyError, TypeError, CatalogError) as exc:
                return wire.error_response(400, f"bad subscribe: {exc}")
            return wire.json_response(200, b'{"ok":true}')
        if req.method == "GET" and req.path == "/locate":
            path = req.query.get("path")
            if not path:
                return wire.error_response(400, "missing path")
            try:
                found = self.locate(path)
            except ValueError as exc:
                return wire.error_response(400, str(exc))
            return wire.json_response(200, canonical_json([n.to_json() for n in found]))
        if req.method == "GET" and req.path == "/origins":
            infos = [s.info for s in self.live()]
            return wire.json_response(200, canonical_json([n.to_json() for n in infos]))
        if req.method == "GET" and req.path == "/status":
            return wire.json_response(200, canonical_json(self.status()))
        return wire.error_response(404)

    def status(self) -> dict:
        now = self.clock()
        with self._lock:
            entries = sorted(self.entries.items())
        return {
            "role": "redirector",
            "ttl_seconds": self.ttl,
            "subscriptions": [
                {"node_id": k, "endpoint": s.info.endpoint, "revision": s.revision,
                 "live": s.expires_at > now, "expires_in": round(s.expires_at - now, 3)}
                for k, s in entries
            ],
        }


def _remote_list(transport, redirector: str, target: str) -> list[NodeInfo]:
    resp = transport.request(redirector, wire.Request("GET", target), timeout=10.0)
    if resp.status != 200:
        raise ConnectionError(f"{target} failed with status {resp.status}")
    return [NodeInfo.from_json(o) for o in json.loads(resp.body)]


def locate_remote(transport, redirector: str, path: str) -> list[NodeInfo]:
    return _remote_list(transport, redirector, wire.locate_target(path))


def origins_remote(transport, redirector: str) -> list[NodeInfo]:
    """Every live subscribed origin, whatever it holds."""
    return _remote_list(transport, redirector, "/origins")
