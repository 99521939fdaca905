"""Site-level authenticated caching proxy.

Hits are served from a content-addressed chunk cache on disk.  Misses are
fetched chunk by chunk from an origin with the cache's own credential,
forwarded to the requester as each chunk arrives, and persisted.  The ACL
check against the cached catalog happens before any origin is contacted.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future
from pathlib import Path
from typing import Callable, Iterable, Optional

from . import wire
from .geo import haversine_km
from .model import (
    Catalog,
    CatalogError,
    FileEntry,
    NodeInfo,
    TokenTable,
    UnknownPath,
    acl_allows,
    canonical_json,
    verify_chunk,
)
from .origin import DataNode, _rel
from .redirector import locate_remote, origins_remote
from .store import ChunkStore, atomic_write

log = logging.getLogger(__name__)


class TooLarge(ValueError):
    """A chunk bigger than the whole cache; it is served but never admitted."""


class CacheIndex:
    """LRU index of cached chunks keyed by digest.

    Iteration order of ``entries`` is access order, oldest first.  All
    mutations hold one lock so ``total_bytes <= capacity`` is true at every
    point another thread can observe.
    """

    def __init__(self, capacity: int, clock: Callable[[], float] = time.time):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.clock = clock
        self.entries: OrderedDict[str, list] = OrderedDict()  # digest -> [size, last_access_at]
        self.total_bytes = 0
        self._lock = threading.RLock()

    def __contains__(self, digest: str) -> bool:
        with self._lock:
            return digest in self.entries

    def __len__(self):
        return len(self.entries)

    def touch(self, digest: str) -> bool:
        with self._lock:
            entry = self.entries.get(digest)
            if entry is None:
                return False
            entry[1] = self.clock()
            self.entries.move_to_end(digest)
            return True

    def admit(self, digest: str, size: int) -> list[str]:
        """Insert ``digest`` and return the digests evicted to make room, oldest first."""
        if size > self.capacity:
            raise TooLarge(f"chunk of {size} bytes exceeds cache capacity {self.capacity}")
        with self._lock:
            if digest in self.entries:
                self.touch(digest)
                return []
            evicted = []
            while self.total_bytes + size > self.capacity:
                victim, (vsize, _) = self.entries.popitem(last=False)
                self.total_bytes -= vsize
                evicted.append(victim)
            self.entries[digest] = [size, self.clock()]
            self.total_bytes += size
            return evicted

    def remove(self, digest: str):
        with self._lock:
            entry = self.entries.pop(digest, None)
            if entry is not None:
                self.total_bytes -= entry[0]

    def to_json(self) -> dict:
        with self._lock:
            return {
                "capacity": self.capacity,
                "entries": [[d, s, t] for d, (s, t) in self.entries.items()],
            }

    def load(self, items: Iterable[tuple[str, int, float]]):
        """Replace contents with (digest, size, last_access_at) triples.

        Oldest entries are evicted if the items exceed capacity; their
        digests are returned.
        """
        with self._lock:
            self.entries.clear()
            self.total_bytes = 0
            for digest, size, ts in sorted(items, key=lambda it: (it[2], it[0])):
                self.entries[digest] = [int(size), float(ts)]
                self.total_bytes += int(size)
            dropped = []
            while self.total_bytes > self.capacity:
                victim, (vsize, _) = self.entries.popitem(last=False)
                self.total_bytes -= vsize
                dropped.append(victim)
            return dropped


class DiskCache:
    """A :class:`CacheIndex` backed by a :class:`ChunkStore` under ``root``.

    Also used as the optional worker-node cache by the client.
    """

    def __init__(self, root, capacity: int, clock: Callable[[], float] = time.time):
        self.root = Path(root)
        self.store = ChunkStore(self.root)
        self.index = CacheIndex(capacity, clock)
        self.index_path = self.root / "index.json"
        self._load()

    def _load(self):
        on_disk = {d: (s, m) for d, s, m in self.store.scan()}
        items = None
        try:
            raw = json.loads(self.index_path.read_text())
            items = [(d, int(s), float(t)) for d, s, t in raw["entries"]
                     if d in on_disk and on_disk[d][0] == int(s)]
            known = {it[0] for it in items}
            items += [(d, s, m) for d, (s, m) in on_disk.items() if d not in known]
        except FileNotFoundError:
            pass
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("cache index %s corrupt (%s); rebuilding from disk", self.index_path, exc)
        if items is None:
            items = [(d, s, m) for d, (s, m) in on_disk.items()]
        for digest in self.index.load(items):
            self.store.delete(digest)
        self.save()

    def save(self):
        atomic_write(self.index_path, json.dumps(self.index.to_json()).encode())

    def get(self, digest: str) -> Optional[bytes]:
        if digest not in self.index:
            return None
        try:
            data = self.store.read(digest)
        except FileNotFoundError:
            self.index.remove(digest)
            return None
        self.index.touch(digest)
        return data

    def put(self, digest: str, data: bytes) -> list[str]:
        """Persist and admit a chunk; raises :class:`TooLarge` for oversize chunks."""
        if len(data) > self.index.capacity:
            raise TooLarge(f"chunk of {len(data)} bytes exceeds capacity")
        self.store.write(digest, data)
        evicted = self.index.admit(digest, len(data))
        for victim in evicted:
            self.store.delete(victim)
        self.save()
        return evicted


class OriginsUnavailable(Exception):
    def __init__(self, causes: list[tuple[str, str]]):
        super().__init__("; ".join(f"{ep}: {why}" for ep, why in causes) or "no origins known")
        self.causes = causes


class CacheProxy(DataNode):
    def __init__(self, node_id: str, endpoint: str, geo, root, capacity: int,
                 cache_token: str, transport, token_table: Optional[TokenTable] = None,
                 redirector: Optional[str] = None, origins: Iterable[str] = (),
                 acl_refresh_seconds: float = 60.0,
                 clock: Callable[[], float] = time.time):
        self.info = NodeInfo(node_id, "cache", endpoint, tuple(geo))
        self.node_id = node_id
        self.disk = DiskCache(root, capacity, clock)
        self.cache_token = cache_token
        self.tokens = token_table or TokenTable()
        if self.tokens.lookup(cache_token) is not None:
            raise ValueError("cache_token must not double as an end-user token")
        self.transport = transport
        self.redirector = redirector
        self.static_origins = list(origins)
        self.acl_refresh_seconds = acl_refresh_seconds
        self.clock = clock

        self._catalog: Optional[Catalog] = None
        self.catalog_fetched_at: Optional[float] = None
        self._inflight: dict[str, Future] = {}
        self._inflight_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._known_origins: dict[str, NodeInfo] = {}
        self.hits = 0
        self.misses = 0
        self.origin_fetches = 0
        self.passthrough = 0
        self.bytes_served = 0
        self._stop = threading.Event()

    # -- catalog / ACLs --------------------------------------------------------

    def current_catalog(self) -> Optional[Catalog]:
        return self._catalog

    def set_catalog(self, catalog: Catalog):
        self._catalog = catalog
        self.catalog_fetched_at = self.clock()

    def catalog_age(self) -> Optional[float]:
        if self.catalog_fetched_at is None:
            return None
        return self.clock() - self.catalog_fetched_at

    def refresh_acls(self) -> Optional[Catalog]:
        """Pull the newest catalog from the first reachable origin.

        When every origin is down the previous catalog stays in force.
        """
        causes = []
        for endpoint in self._catalog_sources():
            try:
                resp = self.transport.request(endpoint, wire.Request("GET", "/catalog"),
                                              timeout=10.0)
                if resp.status != 200:
                    causes.append((endpoint, f"status {resp.status}"))
                    continue
                catalog = Catalog.from_bytes(resp.body)
            except Exception as exc:  # transport or parse failure
                causes.append((endpoint, str(exc)))
                continue
            current = self._catalog
            if current is None or catalog.revision >= current.revision:
                self.set_catalog(catalog)
            else:
                self.catalog_fetched_at = self.clock()
            return self._catalog
        age = self.catalog_age()
        log.warning("ACL refresh failed (%s); catalog age %s s",
                    "; ".join(f"{e}: {c}" for e, c in causes) or "no origins",
                    "n/a" if age is None else f"{age:.0f}")
        return self._catalog

    def _catalog_sources(self) -> list[str]:
        if self.redirector:
            try:
                for info in origins_remote(self.transport, self.redirector):
                    self._known_origins[info.node_id] = info
            except Exception as exc:
                log.warning("redirector %s unavailable: %s", self.redirector, exc)
        seen = []
        for info in self._order(self._known_origins.values()):
            seen.append(info.endpoint)
        for ep in self.static_origins:
            if ep not in seen:
                seen.append(ep)
        return seen

    def _order(self, infos: Iterable[NodeInfo]) -> list[NodeInfo]:
        return sorted(infos, key=lambda n: (haversine_km(self.info.geo, n.geo), n.node_id))

    def origin_candidates(self, path: str) -> list[str]:
        """Origins for ``path``: redirector answers nearest first, then static ones."""
        located = []
        if self.redirector:
            try:
                located = locate_remote(self.transport, self.redirector, path)
            except Exception as exc:
                log.warning("redirector %s unavailable: %s", self.redirector, exc)
        for info in located:
            self._known_origins[info.node_id] = info
        out = [n.endpoint for n in self._order(located)]
        out += [ep for ep in self.static_origins if ep not in out]
        return out

    # -- request handling -----------------------------------------------------

    def handle(self, req: wire.Request) -> wire.Response:
        path = req.path
        if req.method == "GET":
            if path == "/catalog":
                if self._catalog is None:
                    self.refresh_acls()
                if self._catalog is None:
                    return wire.error_response(503, "no catalog available")
                return self._serve_catalog()
            if path == "/status":
                return wire.json_response(200, canonical_json(self.status()))
            if (rel := _rel(path, "/stat")) is not None:
                return self._serve_stat(rel)
            if (rel := _rel(path, "/data")) is not None:
                return self.get(rel, req.headers.get("Range"), req.token)
        return wire.error_response(404 if req.method == "GET" else 400)

    def get(self, path: str, range_value: Optional[str], token: Optional[str]) -> wire.Response:
        principal = self.tokens.lookup(token)
        if principal is None:
            return wire.error_response(401, "missing or unknown token")
        catalog = self._catalog
        if catalog is None:
            return wire.error_response(503, "no catalog; refusing to serve data")
        try:
            entry = catalog.entry(path)
            allowed = acl_allows(catalog, principal, path)
        except (UnknownPath, ValueError):
            return wire.error_response(404, f"no such file: {path}")
        if not allowed:
            return wire.error_response(403, "access denied")

        status, start, end = 200, 0, entry.size
        if range_value is not None:
            try:
                start, end = wire.parse_range(range_value, entry.size)
            except ValueError as exc:
                return wire.error_response(400, str(exc))
            status = 206
        headers = wire.Headers({"Content-Type": "application/octet-stream"})
        if status == 206:
            headers["Content-Range"] = wire.content_range(start, end, entry.size)

        parts = entry.chunks_for_range(start, end)
        if not parts:
            return wire.Response(status, headers, b"")
        # the first chunk is fetched before answering so that a total origin
        # failure can still be reported as a clean 502
        try:
            first = self._slice(entry, parts[0], start, end)
        except OriginsUnavailable as exc:
            return wire.error_response(502, f"all origins failed: {exc}")
        return wire.Response(status, headers,
                             stream=self._stream(entry, parts, start, end, first),
                             length=end - start)

    def _slice(self, entry: FileEntry, part, start: int, end: int) -> bytes:
        idx, chunk = part
        data = self.chunk_bytes(entry, idx)
        lo = max(start, chunk.offset) - chunk.offset
        hi = min(end, chunk.end) - chunk.offset
        piece = data[lo:hi]
        with self._stats_lock:
            self.bytes_served += len(piece)
        return piece

    def _stream(self, entry, parts, start, end, first):
        yield first
        for part in parts[1:]:
            yield self._slice(entry, part, start, end)

    def chunk_bytes(self, entry: FileEntry, idx: int) -> bytes:
        chunk = entry.chunks[idx]
        data = self.disk.get(chunk.sha256)
        if data is not None and verify_chunk(data, chunk):
            with self._stats_lock:
                self.hits += 1
            return data
        if data is not None:
            log.warning("cached chunk %s failed verification; dropping", chunk.sha256)
            self.disk.index.remove(chunk.sha256)
            self.disk.store.delete(chunk.sha256)
        with self._stats_lock:
            self.misses += 1
        return self._single_flight(entry, idx)

    def _single_flight(self, entry: FileEntry, idx: int) -> bytes:
        digest = entry.chunks[idx].sha256
        with self._inflight_lock:
            fut = self._inflight.get(digest)
            leader = fut is None
            if leader:
                fut = Future()
                self._inflight[digest] = fut
        if not leader:
            return fut.result()
        try:
            data = self._fetch_and_persist(entry, idx)
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        else:
            fut.set_result(data)
            return data
        finally:
            with self._inflight_lock:
                self._inflight.pop(digest, None)

    def _fetch_and_persist(self, entry: FileEntry, idx: int) -> bytes:
        chunk = entry.chunks[idx]
        causes = []
        for endpoint in self.origin_candidates(entry.path):
            req = wire.Request("GET", wire.data_target(entry.path), {
                "Range": wire.range_header(chunk.offset, chunk.end),
                wire.TOKEN_HEADER: self.cache_token,
            })
            with self._stats_lock:
                self.origin_fetches += 1
            try:
                resp = self.transport.request(endpoint, req)
            except Exception as exc:
                causes.append((endpoint, str(exc)))
                continue
            if resp.status not in (200, 206):
                causes.append((endpoint, f"status {resp.status}"))
                continue
            if not verify_chunk(resp.body, chunk):
                causes.append((endpoint, "chunk digest mismatch"))
                continue
            try:
                self.disk.put(chunk.sha256, resp.body)
            except TooLarge:
                with self._stats_lock:
                    self.passthrough += 1
            return resp.body
        raise OriginsUnavailable(causes)

    # -- operations ------------------------------------------------------------

    def hit_ratio(self) -> float:
        with self._stats_lock:
            total = self.hits + self.misses
            return self.hits / total if total else 0.0

    def status(self) -> dict:
        catalog = self._catalog
        age = self.catalog_age()
        with self._stats_lock:
            counters = {
                "hits": self.hits,
                "misses": self.misses,
                "origin_fetches": self.origin_fetches,
                "passthrough": self.passthrough,
                "bytes_served": self.bytes_served,
            }
        return dict(
            counters,
            node_id=self.node_id,
            role="cache",
            hit_ratio=self.hit_ratio(),
            capacity_bytes=self.disk.index.capacity,
            total_bytes=self.disk.index.total_bytes,
            cached_chunks=len(self.disk.index),
            revision=catalog.revision if catalog else None,
            catalog_age_seconds=None if age is None else round(age, 3),
        )

    def start_refresher(self) -> threading.Thread:
        def loop():
            while not self._stop.is_set():
                try:
                    self.refresh_acls()
                except CatalogError as exc:  # pragma: no cover - defensive
                    log.error("refresh failed: %s", exc)
                self._stop.wait(self.acl_refresh_seconds)

        t = threading.Thread(target=loop, name="acl-refresh", daemon=True)
        t.start()
        return t

    def stop(self):
        self._stop.set()
        self.disk.save()
