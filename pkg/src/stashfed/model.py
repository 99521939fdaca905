"""Namespace catalog, chunked file entries, principals and ACLs.

Everything here is immutable once built and safe to share between request
handlers.  The catalog is the public half of a repository: file names,
sizes, digests and ACLs.  The private half is the chunk data itself.
"""

from __future__ import annotations

import hashlib
import json
import math
import posixpath
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

DEFAULT_CHUNK_SIZE = 32 * 1024 * 1024

ROLES = ("origin", "cache", "redirector")


class CatalogError(ValueError):
    """Raised when a catalog cannot be built or parsed."""


class UnknownPath(KeyError):
    """The path does not name a file in the catalog.

    Kept distinct from an authorization denial so callers can map it to 404.
    """


def normalize_path(path: str) -> str:
    """Return the normalized absolute form of a logical path."""
    if not isinstance(path, str) or not path:
        raise ValueError(f"invalid logical path: {path!r}")
    norm = posixpath.normpath("/" + path.lstrip("/"))
    # normpath keeps a leading "//"
    if norm.startswith("//"):
        norm = "/" + norm.lstrip("/")
    return norm


def is_under(path: str, prefix: str) -> bool:
    if prefix == "/":
        return True
    return path == prefix or path.startswith(prefix + "/")


@dataclass(frozen=True)
class Principal:
    dn: str

    def __post_init__(self):
        if not isinstance(self.dn, str) or not self.dn:
            raise ValueError("principal DN must be a non-empty string")

    def __str__(self) -> str:
        return self.dn


class TokenTable:
    """Node-local mapping of bearer tokens to principals."""

    def __init__(self, table: Optional[Mapping[str, str]] = None):
        self._table = {tok: Principal(dn) for tok, dn in (table or {}).items()}

    def lookup(self, token: Optional[str]) -> Optional[Principal]:
        if not token:
            return None
        return self._table.get(token)

    def __len__(self):
        return len(self._table)


@dataclass(frozen=True)
class Chunk:
    offset: int
    size: int
    sha256: str

    def to_json(self) -> dict:
        return {"offset": self.offset, "size": self.size, "sha256": self.sha256}

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class FileEntry:
    path: str
    size: int
    chunks: tuple[Chunk, ...]
    file_sha256: str
    acl_tag: str
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self):
        expected = math.ceil(self.size / self.chunk_size) if self.size else 0
        if len(self.chunks) != expected:
            raise CatalogError(
                f"{self.path}: {len(self.chunks)} chunks, expected {expected}"
            )
        if sum(c.size for c in self.chunks) != self.size:
            raise CatalogError(f"{self.path}: chunk sizes do not sum to {self.size}")

    def chunks_for_range(self, start: int, end: int) -> list[tuple[int, Chunk]]:
        """(index, chunk) pairs overlapping the half-open byte range [start, end)."""
        if end <= start:
            return []
        first = start // self.chunk_size
        last = (end - 1) // self.chunk_size
        return [(i, self.chunks[i]) for i in range(first, last + 1)]

    def to_json(self) -> dict:
        return {
            "size": self.size,
            "chunk_size": self.chunk_size,
            "file_sha256": self.file_sha256,
            "acl_tag": self.acl_tag,
            "chunks": [c.to_json() for c in self.chunks],
        }

    @classmethod
    def from_json(cls, path: str, obj: Mapping) -> "FileEntry":
        return cls(
            path=normalize_path(path),
            size=int(obj["size"]),
            chunk_size=int(obj["chunk_size"]),
            file_sha256=str(obj["file_sha256"]),
            acl_tag=str(obj["acl_tag"]),
            chunks=tuple(
                Chunk(int(c["offset"]), int(c["size"]), str(c["sha256"]))
                for c in obj["chunks"]
            ),
        )


@dataclass(frozen=True)
class VariantSymlink:
    path: str
    variant_name: str
    default_target: str

    def to_json(self) -> dict:
        return {
            "path": self.path,
            "variant": self.variant_name,
            "default_target": self.default_target,
        }


@dataclass(frozen=True)
class AclGroup:
    tag: str
    members: frozenset = frozenset()

    def allows(self, principal: Optional[Principal]) -> bool:
        return principal is not None and principal in self.members


@dataclass(frozen=True)
class NodeInfo:
    node_id: str
    role: str
    endpoint: str
    geo: tuple[float, float]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role: must be one of {ROLES}, got {self.role!r}")
        lat, lon = self.geo
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"geo: latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"geo: longitude {lon} outside [-180, 180]")

    def to_json(self) -> dict:
        return {
            "node_id": self.node_id,
            "role": self.role,
            "endpoint": self.endpoint,
            "geo": [self.geo[0], self.geo[1]],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "NodeInfo":
        lat, lon = obj["geo"]
        return cls(
            node_id=str(obj["node_id"]),
            role=str(obj["role"]),
            endpoint=str(obj["endpoint"]),
            geo=(float(lat), float(lon)),
        )


@dataclass(frozen=True)
class Catalog:
    revision: int
    generated_at: int
    files: Mapping[str, FileEntry] = field(default_factory=dict)
    symlinks: tuple[VariantSymlink, ...] = ()
    acls: Mapping[str, AclGroup] = field(default_factory=dict)

    def __post_init__(self):
        if self.revision < 1:
            raise CatalogError("revision must be >= 1")
        for entry in self.files.values():
            if entry.acl_tag not in self.acls:
                raise CatalogError(f"{entry.path}: unknown ACL tag {entry.acl_tag!r}")
        for link in self.symlinks:
            if link.path in self.files:
                raise CatalogError(f"path collision between file and symlink: {link.path}")
        if len({link.path for link in self.symlinks}) != len(self.symlinks):
            raise CatalogError("duplicate symlink paths")
        for link in self.symlinks:
            for other in self.symlinks:
                if is_under(link.default_target, other.path):
                    raise CatalogError(
                        f"{link.path}: default target {link.default_target} is itself "
                        f"under symlink {other.path}")

    def entry(self, path: str) -> FileEntry:
        try:
            return self.files[normalize_path(path)]
        except KeyError:
            raise UnknownPath(path) from None

    def to_json(self) -> dict:
        return {
            "revision": self.revision,
            "generated_at": self.generated_at,
            "files": {p: e.to_json() for p, e in self.files.items()},
            "symlinks": [s.to_json() for s in self.symlinks],
            "acls": {
                tag: {"members": sorted(m.dn for m in group.members)}
                for tag, group in self.acls.items()
            },
        }

    def to_bytes(self) -> bytes:
        """Canonical JSON: sorted keys, no insignificant whitespace."""
        return canonical_json(self.to_json())

    @classmethod
    def from_json(cls, obj: Mapping) -> "Catalog":
        try:
            return cls(
                revision=int(obj["revision"]),
                generated_at=int(obj["generated_at"]),
                files={
                    normalize_path(p): FileEntry.from_json(p, e)
                    for p, e in obj["files"].items()
                },
                symlinks=tuple(
                    VariantSymlink(
                        normalize_path(s["path"]),
                        str(s["variant"]),
                        normalize_path(s["default_target"]),
                    )
                    for s in obj["symlinks"]
                ),
                acls={
                    tag: AclGroup(tag, frozenset(Principal(dn) for dn in g["members"]))
                    for tag, g in obj["acls"].items()
                },
            )
        except (KeyError, TypeError) as exc:
            raise CatalogError(f"malformed catalog: {exc!r}") from exc

    @classmethod
    def from_bytes(cls, data: bytes) -> "Catalog":
        try:
            obj = json.loads(data)
        except ValueError as exc:
            raise CatalogError(f"catalog is not valid JSON: {exc}") from exc
        return cls.from_json(obj)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def chunk_file(content: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[Chunk]:
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    view = memoryview(content)
    return [
        Chunk(off, len(view[off:off + chunk_size]), sha256_hex(view[off:off + chunk_size]))
        for off in range(0, len(content), chunk_size)
    ]


def make_entry(path: str, content: bytes, acl_tag: str,
               chunk_size: int = DEFAULT_CHUNK_SIZE) -> FileEntry:
    return FileEntry(
        path=normalize_path(path),
        size=len(content),
        chunk_size=chunk_size,
        chunks=tuple(chunk_file(content, chunk_size)),
        file_sha256=sha256_hex(content),
        acl_tag=acl_tag,
    )


def longest_prefix_tag(path: str, acl_spec: Mapping[str, str]) -> Optional[str]:
    best = None
    for prefix, tag in acl_spec.items():
        prefix = normalize_path(prefix)
        if is_under(path, prefix) and (best is None or len(prefix) > len(best[0])):
            best = (prefix, tag)
    return best[1] if best else None


SymlinkSpec = Iterable[Union[VariantSymlink, Mapping]]


def _as_symlink(spec) -> VariantSymlink:
    if isinstance(spec, VariantSymlink):
        return spec
    return VariantSymlink(
        normalize_path(spec["path"]),
        str(spec["variant"]),
        normalize_path(spec["default_target"]),
    )


def build_catalog(
    source_tree: Mapping[str, bytes],
    acl_spec: Mapping[str, str],
    symlink_spec: SymlinkSpec = (),
    prev_revision: int = 0,
    acl_members: Optional[Mapping[str, Iterable[str]]] = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    generated_at: Optional[int] = None,
) -> Catalog:
    """Build the next catalog revision for ``source_tree``.

    Each file takes the tag of the longest ``acl_spec`` prefix covering it.
    ``acl_members`` maps tags to member DNs; tags referenced by ``acl_spec`` but
    absent there become empty groups.
    """
    acl_members = acl_members or {}
    files = {}
    for raw_path in sorted(source_tree):
        path = normalize_path(raw_path)
        if path in files:
            raise CatalogError(f"duplicate path after normalization: {path}")
        tag = longest_prefix_tag(path, acl_spec)
        if tag is None:
            raise CatalogError(f"no ACL prefix covers {path}")
        files[path] = make_entry(path, source_tree[raw_path], tag, chunk_size)

    symlinks = tuple(sorted((_as_symlink(s) for s in symlink_spec), key=lambda s: s.path))
    for link in symlinks:
        if link.path in files:
            raise CatalogError(f"path collision between file and symlink: {link.path}")

    tags = set(acl_spec.values()) | set(acl_members)
    acls = {
        tag: AclGroup(tag, frozenset(Principal(dn) for dn in acl_members.get(tag, ())))
        for tag in sorted(tags)
    }
    return Catalog(
        revision=prev_revision + 1,
        generated_at=int(time.time()) if generated_at is None else int(generated_at),
        files=files,
        symlinks=symlinks,
        acls=acls,
    )


@dataclass(frozen=True)
class Verdict:
    ok: bool
    chunk_index: Optional[int] = None
    whole_file: bool = False

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "ok"
        if self.chunk_index is not None:
            return f"mismatch(chunk_index={self.chunk_index})"
        return "mismatch(whole_file)"


OK = Verdict(True)


def verify_chunk(data: bytes, chunk: Chunk) -> bool:
    return len(data) == chunk.size and sha256_hex(data) == chunk.sha256


def verify_file(content: bytes, entry: FileEntry) -> Verdict:
    """Check ``content`` against every chunk digest and the whole-file digest.

    A length mismatch is reported as a whole-file mismatch; otherwise the
    first chunk with a bad digest is named.
    """
    if len(content) != entry.size:
        return Verdict(False, whole_file=True)
    view = memoryview(content)
    for i, chunk in enumerate(entry.chunks):
        if not verify_chunk(view[chunk.offset:chunk.end], chunk):
            return Verdict(False, chunk_index=i)
    if sha256_hex(content) != entry.file_sha256:
        return Verdict(False, whole_file=True)
    return OK


def resolve_variant(
    path: str,
    site_config: Mapping[str, str],
    symlinks: Sequence[VariantSymlink],
) -> str:
    path = normalize_path(path)
    for link in symlinks:
        if is_under(path, link.path):
            target = site_config.get(link.variant_name) or link.default_target
            rest = path[len(link.path):]
            return normalize_path(normalize_path(target) + rest)
    return path


def acl_allows(catalog: Catalog, principal: Optional[Principal], path: str) -> bool:
    """True iff ``principal`` is a member of the ACL group tagging ``path``.

    Raises :class:`UnknownPath` when the path is not a file in the catalog.
    """
    entry = catalog.entry(path)
    if principal is None:
        return False
    group = catalog.acls.get(entry.acl_tag)
    return group is not None and group.allows(principal)
