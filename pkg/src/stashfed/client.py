"""Client library behind ``fedcp``.

A fetch pins one catalog revision, resolves variant symlinks, and walks a
prioritized source list until every chunk of the file has been obtained
and verified.  Any failure at a source (refusal, 4xx/5xx, short read, bad
digest) moves on to the next one.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from . import wire
from .cache import DiskCache, TooLarge
from .geo import haversine_km
from .model import (
    Catalog,
    CatalogError,
    FileEntry,
    NodeInfo,
    UnknownPath,
    resolve_variant,
    verify_chunk,
    verify_file,
)
from .redirector import locate_remote
from .store import atomic_write
from .transport import ConnectionFailed, ShortRead, SocketTransport

log = logging.getLogger(__name__)

KINDS = ("local_fs", "cache", "origin")
MODES = ("direct", "chunked")
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 0.5

EXIT_OK = 0
EXIT_AUTH = 2
EXIT_NOT_FOUND = 3
EXIT_ALL_FAILED = 4
EXIT_VERIFY = 5


@dataclass(frozen=True)
class Source:
    kind: str
    location: str
    node_id: str = ""
    # local_fs only: read this absolute path instead of <location>/<logical path>
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")

    def __str__(self):
        if self.kind == "local_fs" and self.path:
            return f"local_fs:{self.path}"
        return f"{self.kind}:{self.location}"

    @property
    def is_network(self) -> bool:
        return self.kind != "local_fs"


def source_list(sources: Sequence[Source]) -> list[Source]:
    """Validate a source list and move local_fs entries to the front (stable)."""
    if not sources:
        raise ValueError("source list must not be empty")
    local = [s for s in sources if s.kind == "local_fs"]
    return local + [s for s in sources if s.kind != "local_fs"]


def order_sources(client_geo, candidates: Sequence[NodeInfo]) -> list[Source]:
    """Caches before origins; within each kind nearest first, then by node_id."""
    def key(n: NodeInfo):
        return (haversine_km(client_geo, n.geo), n.node_id)

    caches = sorted((n for n in candidates if n.role == "cache"), key=key)
    origins = sorted((n for n in candidates if n.role == "origin"), key=key)
    return [Source(n.role, n.endpoint, n.node_id) for n in caches + origins]


@dataclass
class SourceFailure:
    source: str
    reason: str  # auth | not_found | verification | overloaded | connection | short_read | error
    detail: str = ""

    def __str__(self):
        return f"{self.source}: {self.reason}" + (f" ({self.detail})" if self.detail else "")


class FetchError(Exception):
    def __init__(self, message: str, failures: Sequence[SourceFailure] = (),
                 exit_code: Optional[int] = None):
        self.failures = list(failures)
        self.exit_code = exit_code if exit_code is not None else classify(self.failures)
        lines = [message] + [f"  {f}" for f in self.failures]
        super().__init__("\n".join(lines))


def classify(failures: Sequence[SourceFailure]) -> int:
    reasons = {f.reason for f in failures}
    if reasons == {"auth"}:
        return EXIT_AUTH
    if reasons == {"not_found"}:
        return EXIT_NOT_FOUND
    if reasons == {"verification"}:
        return EXIT_VERIFY
    return EXIT_ALL_FAILED


@dataclass
class FetchReport:
    path: str
    resolved_path: str
    dest: str
    size: int
    revision: int
    mode: str = ""
    source: str = ""
    sources_used: list = field(default_factory=list)
    bytes_moved: int = 0
    connections: int = 0
    retries: int = 0
    fallbacks: int = 0
    local_cache_hits: int = 0
    wall_time: float = 0.0
    failures: list = field(default_factory=list)

    def to_json(self) -> dict:
        out = asdict(self)
        out["failures"] = [str(f) for f in self.failures]
        return out

    def to_text(self) -> str:
        lines = [
            f"{self.path} -> {self.dest}",
            f"  size {self.size} bytes, catalog revision {self.revision}",
            f"  served by {self.source} ({self.mode or 'n/a'})",
            f"  {self.bytes_moved} bytes over {self.connections} connections,"
            f" {self.retries} retries, {self.fallbacks} fallbacks,"
            f" {self.wall_time:.3f} s",
        ]
        lines += [f"  failed: {f}" for f in self.failures]
        return "\n".join(lines)


class _SourceFailed(Exception):
    def __init__(self, failure: SourceFailure):
        super().__init__(str(failure))
        self.failure = failure


def _status_failure(src: Source, status: int, body: bytes) -> SourceFailure:
    detail = body[:200].decode("utf-8", "replace")
    if status in (401, 403):
        return SourceFailure(str(src), "auth", f"status {status}: {detail}")
    if status == 404:
        return SourceFailure(str(src), "not_found", detail)
    if status in (429, 503):
        return SourceFailure(str(src), "overloaded", f"status {status}")
    return SourceFailure(str(src), "error", f"status {status}: {detail}")


class Client:
    def __init__(self, transport=None, token: Optional[str] = None,
                 site_config: Optional[Mapping[str, str]] = None, geo=None,
                 redirector: Optional[str] = None, local_cache: Optional[DiskCache] = None,
                 retries: int = DEFAULT_RETRIES, backoff_base: float = DEFAULT_BACKOFF,
                 sleep: Callable[[float], None] = time.sleep,
                 clock: Callable[[], float] = time.monotonic):
        self.transport = transport or SocketTransport()
        self.token = token
        self.site_config = dict(site_config or {})
        self.geo = tuple(geo) if geo is not None else None
        self.redirector = redirector
        self.local_cache = local_cache
        self.retries = retries
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.clock = clock

    # -- catalog and metadata ------------------------------------------------

    def fetch_catalog(self, sources: Sequence[Source]) -> Catalog:
        failures = []
        for src in sources:
            if not src.is_network:
                continue
            try:
                resp = self.transport.request(src.location, wire.Request("GET", "/catalog"))
            except (ConnectionFailed, ShortRead) as exc:
                failures.append(SourceFailure(str(src), "connection", str(exc)))
                continue
            if resp.status != 200:
                failures.append(_status_failure(src, resp.status, resp.body))
                continue
            try:
                return Catalog.from_bytes(resp.body)
            except CatalogError as exc:
                failures.append(SourceFailure(str(src), "error", str(exc)))
        raise FetchError("could not obtain a catalog from any source", failures,
                         exit_code=EXIT_ALL_FAILED)

    def located_sources(self, path: str) -> list[Source]:
        if not self.redirector:
            return []
        try:
            found = locate_remote(self.transport, self.redirector, path)
        except Exception as exc:
            log.warning("redirector %s: %s", self.redirector, exc)
            return []
        return order_sources(self.geo or (0.0, 0.0), found)

    def resolve(self, catalog: Catalog, path: str) -> tuple[str, str]:
        """(catalog path, site path) for ``path`` under this client's site config."""
        return (resolve_variant(path, {}, catalog.symlinks),
                resolve_variant(path, self.site_config, catalog.symlinks))

    def stat(self, path: str, sources: Sequence[Source] = (),
             catalog: Optional[Catalog] = None) -> FileEntry:
        if catalog is None:
            catalog = self.fetch_catalog(list(sources) + self.located_sources(path))
        catalog_path, _ = self.resolve(catalog, path)
        try:
            return catalog.entry(catalog_path)
        except UnknownPath:
            raise FetchError(f"{path}: not found in catalog revision {catalog.revision}",
                             exit_code=EXIT_NOT_FOUND) from None

    # -- fetch -----------------------------------------------------------------

    def fetch(self, path: str, dest, mode: Optional[str] = None,
              sources: Sequence[Source] = (), catalog: Optional[Catalog] = None) -> FetchReport:
        t0 = self.clock()
        if mode is not None and mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        network = list(sources) + [s for s in self.located_sources(path) if s not in sources]
        if catalog is None:
            catalog = self.fetch_catalog(network)
        catalog_path, site_path = self.resolve(catalog, path)
        try:
            entry = catalog.entry(catalog_path)
        except UnknownPath:
            raise FetchError(f"{path}: not found in catalog revision {catalog.revision}",
                             exit_code=EXIT_NOT_FOUND) from None
        candidates = list(network)
        if site_path != catalog_path:
            candidates.insert(0, Source("local_fs", "/", path=site_path))
        if not candidates:
            raise ValueError("source list must not be empty")
        ordered = source_list(candidates)

        report = FetchReport(path=path, resolved_path=catalog_path, dest=str(dest),
                             size=entry.size, revision=catalog.revision)
        have: dict[int, bytes] = {}
        self._from_local_cache(entry, have, report)

        for src in ordered:
            if len(have) == len(entry.chunks):
                break
            before = len(have)
            try:
                self._fetch_from(src, entry, catalog_path, mode, have, report)
            except _SourceFailed as exc:
                report.failures.append(exc.failure)
                log.info("source failed: %s", exc.failure)
                if len(have) > before:
                    report.sources_used.append(str(src))
                continue
            report.sources_used.append(str(src))
            report.source = str(src)

        if len(have) < len(entry.chunks):
            report.wall_time = self.clock() - t0
            raise FetchError(f"{path}: all sources failed", report.failures)

        report.fallbacks = len(report.failures)
        if not report.source:
            report.source = report.sources_used[-1] if report.sources_used else "local_cache"
        content = b"".join(have[i] for i in range(len(entry.chunks)))
        verdict = verify_file(content, entry)
        if not verdict:
            raise FetchError(f"{path}: assembled file failed verification ({verdict.describe()})",
                             report.failures, exit_code=EXIT_VERIFY)
        atomic_write(dest, content)
        self._to_local_cache(entry, have)
        report.wall_time = self.clock() - t0
        return report

    def _from_local_cache(self, entry, have, report):
        if self.local_cache is None:
            return
        for i, chunk in enumerate(entry.chunks):
            data = self.local_cache.get(chunk.sha256)
            if data is not None and verify_chunk(data, chunk):
                have[i] = data
                report.local_cache_hits += 1

    def _to_local_cache(self, entry, have):
        if self.local_cache is None:
            return
        for i, chunk in enumerate(entry.chunks):
            try:
                self.local_cache.put(chunk.sha256, have[i])
            except TooLarge:
                pass

    def _fetch_from(self, src: Source, entry: FileEntry, catalog_path: str,
                    mode: Optional[str], have: dict, report: FetchReport):
        if src.kind == "local_fs":
            self._read_local(src, entry, catalog_path, have)
            report.mode = report.mode or "local"
            return
        use = mode or ("chunked" if src.kind == "cache" else "direct")
        report.mode = use
        if use == "direct":
            self._direct(src, entry, catalog_path, have, report)
        else:
            self._chunked(src, entry, catalog_path, have, report)

    def _read_local(self, src: Source, entry: FileEntry, catalog_path: str, have: dict):
        target = Path(src.path) if src.path else Path(src.location) / catalog_path.lstrip("/")
        try:
            content = target.read_bytes()
        except FileNotFoundError:
            raise _SourceFailed(SourceFailure(str(src), "not_found", str(target)))
        except OSError as exc:
            raise _SourceFailed(SourceFailure(str(src), "error", str(exc)))
        bad = self._accept(entry, content, 0, have)
        if bad is not None or len(content) != entry.size:
            raise _SourceFailed(SourceFailure(
                str(src), "verification",
                f"chunk {bad}" if bad is not None else f"size {len(content)} != {entry.size}"))

    def _request(self, src: Source, catalog_path: str, range_value: Optional[str],
                 report: FetchReport) -> bytes:
        headers = {}
        if self.token:
            headers[wire.TOKEN_HEADER] = self.token
        if range_value:
            headers["Range"] = range_value
        req = wire.Request("GET", wire.data_target(catalog_path), headers)
        attempt = 0
        while True:
            report.connections += 1
            try:
                resp = self.transport.request(src.location, req)
            except ShortRead as exc:
                report.bytes_moved += len(exc.partial)
                raise _SourceFailed(SourceFailure(str(src), "short_read", str(exc)), ) from exc
            except ConnectionFailed as exc:
                raise _SourceFailed(SourceFailure(str(src), "connection", str(exc))) from exc
            if resp.status in (429, 503) and attempt < self.retries:
                delay = self.backoff_base * 2 ** attempt
                attempt += 1
                report.retries += 1
                log.info("%s answered %d; retry %d in %.2f s", src, resp.status, attempt, delay)
                self.sleep(delay)
                continue
            if resp.status not in (200, 206):
                raise _SourceFailed(_status_failure(src, resp.status, resp.body))
            report.bytes_moved += len(resp.body)
            return resp.body

    def _accept(self, entry: FileEntry, data: bytes, offset: int, have: dict) -> Optional[int]:
        """Keep every complete, verified chunk found in ``data`` (which starts at ``offset``).

        Returns the index of the first chunk that failed its digest, if any.
        """
        bad = None
        for i, chunk in enumerate(entry.chunks):
            if i in have:
                continue
            lo, hi = chunk.offset - offset, chunk.end - offset
            if lo < 0 or hi > len(data):
                continue
            piece = data[lo:hi]
            if verify_chunk(piece, chunk):
                have[i] = piece
            elif bad is None:
                bad = i
        return bad

    def _direct(self, src, entry, catalog_path, have, report):
        try:
            body = self._request(src, catalog_path, None, report)
        except _SourceFailed as exc:
            if exc.failure.reason == "short_read" and isinstance(exc.__cause__, ShortRead):
                self._accept(entry, exc.__cause__.partial, 0, have)
            raise
        bad = self._accept(entry, body, 0, have)
        if bad is not None:
            raise _SourceFailed(SourceFailure(str(src), "verification", f"chunk {bad}"))
        if len(body) != entry.size:
            raise _SourceFailed(SourceFailure(str(src), "verification",
                                              f"size {len(body)} != {entry.size}"))

    def _chunked(self, src, entry, catalog_path, have, report):
        for i, chunk in enumerate(entry.chunks):
            if i in have:
                continue
            body = self._request(src, catalog_path, wire.range_header(chunk.offset, chunk.end),
                                 report)
            if not verify_chunk(body, chunk):
                raise _SourceFailed(SourceFailure(str(src), "verification", f"chunk {i}"))
            have[i] = body


def parse_sources(spec: str) -> list[Source]:
    """Parse ``--sources``: comma list of ``host:port`` (cache), ``kind=location``
    or absolute directory paths (local_fs)."""
    out = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        if "=" in item:
            kind, _, loc = item.partition("=")
            kind = {"local": "local_fs", "file": "local_fs"}.get(kind, kind)
            out.append(Source(kind, loc))
        elif item.startswith("/") or item.startswith("."):
            out.append(Source("local_fs", os.path.abspath(item)))
        else:
            out.append(Source("cache", item))
    return out
