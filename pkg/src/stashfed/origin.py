"""Authoritative data source.

Serves the public catalog and authenticated byte ranges, admits every data
transfer through a :class:`TransferLedger`, and keeps itself registered
with a redirector.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

from . import wire
from .model import Catalog, NodeInfo, Principal, TokenTable, UnknownPath, acl_allows, canonical_json
from .store import ChunkStore

log = logging.getLogger(__name__)

MiB = 1024 * 1024
KiB = 1024
GiB = 1024 * MiB

DEFAULT_LIMIT_PER_PRINCIPAL = 10
HEARTBEAT_SECONDS = 10.0


@dataclass(frozen=True)
class MemoryModel:
    per_connection: int
    cap: int
    mode: str  # "refuse" | "crash"

    def __post_init__(self):
        if self.mode not in ("refuse", "crash"):
            raise ValueError(f"memory.mode: expected 'refuse' or 'crash', got {self.mode!r}")
        if self.per_connection < 0 or self.cap <= 0:
            raise ValueError("memory: per_connection must be >= 0 and cap > 0")

    @property
    def max_connections(self) -> int:
        if self.per_connection == 0:
            return 2 ** 62
        return self.cap // self.per_connection


def process_model(cap: int = 64 * GiB) -> MemoryModel:
    """One process (and JVM) per connection; exhausting memory kills the server."""
    return MemoryModel(128 * MiB, cap, "crash")


def thread_model(cap: int = 64 * GiB) -> MemoryModel:
    """Multi-threaded server: a small state block per connection, refuses when full."""
    return MemoryModel(64 * KiB, cap, "refuse")


class Admission(enum.Enum):
    ADMITTED = "admitted"
    OVER_LIMIT = "over_limit"
    OUT_OF_MEMORY = "out_of_memory"
    CRASHED = "crashed"


@dataclass(frozen=True)
class Ticket:
    principal: Principal
    generation: int


class TransferLedger:
    """Per-principal concurrency and memory accounting for active transfers.

    ``admit`` is an atomic check-and-increment.  In crash mode an admission
    that would push the ledger past the cap takes the whole server down:
    every active transfer is dropped and later admissions fail until
    :meth:`restart`.
    """

    def __init__(self, limit_per_principal: Optional[int] = DEFAULT_LIMIT_PER_PRINCIPAL,
                 memory: Optional[MemoryModel] = None):
        self.limit_per_principal = limit_per_principal
        self.memory = memory or thread_model()
        self._lock = threading.Lock()
        self.active: dict[Principal, int] = {}
        self.total = 0
        self.generation = 0
        self.crashed = False
        self.crash_events = 0
        self.refusals = {Admission.OVER_LIMIT: 0, Admission.OUT_OF_MEMORY: 0,
                         Admission.CRASHED: 0}
        self.peak_total = 0
        self.peak_memory = 0
        self.peak_per_principal: dict[Principal, int] = {}

    @property
    def memory_in_use(self) -> int:
        return self.total * self.memory.per_connection

    def admit(self, principal: Principal) -> tuple[Admission, Optional[Ticket]]:
        with self._lock:
            if self.crashed:
                self.refusals[Admission.CRASHED] += 1
                return Admission.CRASHED, None
            current = self.active.get(principal, 0)
            if self.limit_per_principal is not None and current >= self.limit_per_principal:
                self.refusals[Admission.OVER_LIMIT] += 1
                return Admission.OVER_LIMIT, None
            needed = (self.total + 1) * self.memory.per_connection
            if needed > self.memory.cap:
                if self.memory.mode == "refuse":
                    self.refusals[Admission.OUT_OF_MEMORY] += 1
                    return Admission.OUT_OF_MEMORY, None
                self.peak_memory = max(self.peak_memory, needed)
                self._crash_locked()
                return Admission.CRASHED, None
            self.active[principal] = current + 1
            self.total += 1
            self.peak_total = max(self.peak_total, self.total)
            self.peak_memory = max(self.peak_memory, self.total * self.memory.per_connection)
            self.peak_per_principal[principal] = max(
                self.peak_per_principal.get(principal, 0), current + 1
            )
            return Admission.ADMITTED, Ticket(principal, self.generation)

    def release(self, ticket: Ticket):
        with self._lock:
            if ticket.generation != self.generation:
                return  # transfer died with a crashed server
            n = self.active.get(ticket.principal, 0)
            if n <= 0:
                raise RuntimeError(f"release without admission for {ticket.principal}")
            if n == 1:
                del self.active[ticket.principal]
            else:
                self.active[ticket.principal] = n - 1
            self.total -= 1

    def _crash_locked(self):
        log.error("memory exhausted (%d connections x %d bytes > cap %d); server crashed",
                  self.total + 1, self.memory.per_connection, self.memory.cap)
        self.crashed = True
        self.crash_events += 1
        self.active.clear()
        self.total = 0
        self.generation += 1

    def restart(self):
        with self._lock:
            self.crashed = False
            self.active.clear()
            self.total = 0
            self.generation += 1

    def is_current(self, ticket: Ticket) -> bool:
        return ticket.generation == self.generation and not self.crashed

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "active_total": self.total,
                "active": {p.dn: n for p, n in sorted(self.active.items(), key=lambda kv: kv[0].dn)},
                "limit_per_principal": self.limit_per_principal,
                "memory_in_use": self.total * self.memory.per_connection,
                "memory": {"per_connection": self.memory.per_connection,
                           "cap": self.memory.cap, "mode": self.memory.mode},
                "peak_total": self.peak_total,
                "peak_memory": self.peak_memory,
                "crashed": self.crashed,
                "crash_events": self.crash_events,
                "refusals": {k.value: v for k, v in self.refusals.items()},
            }


class DataNode:
    """Request handling shared by origins and caches: catalog, stat, status."""

    node_id: str

    def current_catalog(self) -> Optional[Catalog]:
        raise NotImplementedError

    def _serve_catalog(self) -> wire.Response:
        catalog = self.current_catalog()
        if catalog is None:
            return wire.error_response(404, "no catalog published")
        return wire.json_response(200, catalog.to_bytes())

    def _serve_stat(self, path: str) -> wire.Response:
        catalog = self.current_catalog()
        if catalog is None:
            return wire.error_response(404, "no catalog published")
        try:
            entry = catalog.entry(path)
        except (UnknownPath, ValueError):
            return wire.error_response(404, f"no such file: {path}")
        body = dict(entry.to_json(), path=entry.path, revision=catalog.revision)
        return wire.json_response(200, canonical_json(body))


def _rel(path: str, prefix: str) -> Optional[str]:
    if path == prefix or path.startswith(prefix + "/"):
        return path[len(prefix):] or "/"
    return None


class _Transfer:
    """Body iterator for an admitted transfer.

    The ledger slot is released exactly once: on exhaustion, on error, or on
    ``close()`` even if the body was never started.
    """

    def __init__(self, pieces: Iterator[bytes], release: Callable[[], None]):
        self._pieces = pieces
        self._release = release
        self._closed = False

    def __iter__(self):
        return self

    def __next__(self) -> bytes:
        if self._closed:
            raise StopIteration
        try:
            return next(self._pieces)
        except BaseException:
            self.close()
            raise

    def close(self):
        if not self._closed:
            self._closed = True
            self._pieces.close()
            self._release()


class Origin(DataNode):
    def __init__(self, node_id: str, endpoint: str, geo, store: ChunkStore,
                 catalog: Optional[Catalog] = None, token_table: Optional[TokenTable] = None,
                 ledger: Optional[TransferLedger] = None, piece_size: int = 1 * MiB):
        self.info = NodeInfo(node_id, "origin", endpoint, tuple(geo))
        self.node_id = node_id
        self.store = store
        self.tokens = token_table or TokenTable()
        self.ledger = ledger or TransferLedger()
        self.piece_size = piece_size
        self._catalog = catalog
        self._listeners: list[Callable[[Catalog], None]] = []
        self.bytes_served = 0
        self._stats_lock = threading.Lock()

    # catalog swaps are a single reference assignment; requests capture the
    # reference once so in-flight transfers finish on the revision they began with
    def current_catalog(self) -> Optional[Catalog]:
        return self._catalog

    def publish(self, catalog: Catalog):
        self._catalog = catalog
        for cb in list(self._listeners):
            cb(catalog)

    def on_publish(self, callback: Callable[[Catalog], None]):
        self._listeners.append(callback)

    def handle(self, req: wire.Request) -> wire.Response:
        path = req.path
        if req.method == "GET":
            if path == "/catalog":
                return self._serve_catalog()
            if path == "/status":
                return wire.json_response(200, canonical_json(self.status()))
            if (rel := _rel(path, "/stat")) is not None:
                return self._serve_stat(rel)
            if (rel := _rel(path, "/data")) is not None:
                return self.serve_data(rel, req.headers.get("Range"), req.token)
        return wire.error_response(404 if req.method == "GET" else 400)

    def serve_data(self, path: str, range_value: Optional[str],
                   token: Optional[str]) -> wire.Response:
        principal = self.tokens.lookup(token)
        if principal is None:
            return wire.error_response(401, "missing or unknown token")
        catalog = self._catalog
        if catalog is None:
            return wire.error_response(404, "no catalog published")
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

        verdict, ticket = self.ledger.admit(principal)
        if verdict is Admission.OVER_LIMIT:
            return wire.error_response(429, "too many concurrent transfers")
        if verdict is not Admission.ADMITTED:
            return wire.error_response(503, "server memory exhausted")

        headers = wire.Headers({"Content-Type": "application/octet-stream"})
        if status == 206:
            headers["Content-Range"] = wire.content_range(start, end, entry.size)
        return wire.Response(status, headers, stream=self._stream(entry, start, end, ticket),
                             length=end - start)

    def _stream(self, entry, start, end, ticket):
        return _Transfer(self._pieces(entry, start, end, ticket),
                         lambda: self.ledger.release(ticket))

    def _pieces(self, entry, start, end, ticket):
        for _, chunk in entry.chunks_for_range(start, end):
            lo = max(start, chunk.offset) - chunk.offset
            hi = min(end, chunk.end) - chunk.offset
            for off in range(lo, hi, self.piece_size):
                if not self.ledger.is_current(ticket):
                    raise ConnectionAbortedError("server crashed mid-transfer")
                piece = self.store.read(chunk.sha256, off, min(hi, off + self.piece_size))
                with self._stats_lock:
                    self.bytes_served += len(piece)
                yield piece

    def status(self) -> dict:
        catalog = self._catalog
        return {
            "node_id": self.node_id,
            "role": "origin",
            "revision": catalog.revision if catalog else None,
            "files": len(catalog.files) if catalog else 0,
            "bytes_served": self.bytes_served,
            "ledger": self.ledger.snapshot(),
        }


class Registrar:
    """Keeps an origin subscribed to a redirector.

    Heartbeats every ``interval`` seconds; failed attempts back off
    exponentially (capped at ``max_backoff``) while the origin keeps serving.
    A new catalog revision triggers an immediate re-subscribe.
    """

    def __init__(self, origin: Origin, redirector: str, transport,
                 interval: float = HEARTBEAT_SECONDS, backoff_base: float = 1.0,
                 max_backoff: float = 60.0, clock: Callable[[], float] = time.monotonic):
        self.origin = origin
        self.redirector = redirector
        self.transport = transport
        self.interval = interval
        self.backoff_base = backoff_base
        self.max_backoff = max_backoff
        self.clock = clock
        self.next_due = clock()
        self.failures = 0
        self.sent = 0
        self.registered_revision: Optional[int] = None
        self._wake = threading.Event()
        self._stop = threading.Event()
        origin.on_publish(self._revision_changed)

    def _revision_changed(self, catalog: Catalog):
        self.next_due = self.clock()
        self._wake.set()

    def subscribe_body(self) -> bytes:
        catalog = self.origin.current_catalog()
        body = self.origin.info.to_json()
        body["revision"] = catalog.revision if catalog else 0
        return canonical_json(body)

    def register_once(self) -> bool:
        req = wire.Request("POST", "/subscribe", {"Content-Type": "application/json"},
                           self.subscribe_body())
        try:
            resp = self.transport.request(self.redirector, req, timeout=5.0)
        except Exception as exc:
            log.warning("redirector %s unreachable: %s", self.redirector, exc)
            return False
        if resp.status != 200:
            log.warning("redirector %s rejected subscribe: %d", self.redirector, resp.status)
            return False
        catalog = self.origin.current_catalog()
        self.registered_revision = catalog.revision if catalog else 0
        return True

    def tick(self) -> bool:
        """Subscribe if due; returns True when a subscribe was delivered."""
        now = self.clock()
        if now < self.next_due or self.origin.current_catalog() is None:
            return False
        ok = self.register_once()
        self.sent += 1
        if ok:
            self.failures = 0
            self.next_due = now + self.interval
        else:
            delay = min(self.max_backoff, self.backoff_base * 2 ** self.failures)
            self.failures += 1
            self.next_due = now + delay
        return ok

    def run(self):
        while not self._stop.is_set():
            self.tick()
            self._wake.wait(max(0.05, self.next_due - self.clock()))
            self._wake.clear()

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.run, name="registrar", daemon=True)
        t.start()
        return t

    def stop(self):
        self._stop.set()
        self._wake.set()
