"""Publish a source directory as a content-addressed repository.

Chunks land under ``<out_dir>/data`` first; ``catalog.json`` is swapped in
last, so a reader polling the catalog never sees one that references a
chunk which is not on disk yet.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .model import DEFAULT_CHUNK_SIZE, Catalog, CatalogError, build_catalog, normalize_path
from .store import ChunkStore, atomic_write

log = logging.getLogger(__name__)


class PublishError(Exception):
    pass


@dataclass
class RepoSpec:
    source_dir: str
    out_dir: str
    acl_spec: Mapping[str, str] = field(default_factory=lambda: {"/": "default"})
    acl_members: Mapping[str, Sequence[str]] = field(default_factory=dict)
    symlink_spec: Sequence[Mapping] = ()
    chunk_size: int = DEFAULT_CHUNK_SIZE
    # logical prefix under which the source tree appears, e.g. "/frames"
    prefix: str = "/"

    @classmethod
    def from_json(cls, obj: Mapping) -> "RepoSpec":
        return cls(
            source_dir=obj["source_dir"],
            out_dir=obj["out_dir"],
            acl_spec=obj.get("acl_spec", {"/": "default"}),
            acl_members=obj.get("acl_members", {}),
            symlink_spec=obj.get("symlinks", ()),
            chunk_size=int(obj.get("chunk_size", DEFAULT_CHUNK_SIZE)),
            prefix=obj.get("prefix", "/"),
        )


@dataclass
class PublishResult:
    catalog: Catalog
    chunks_written: int
    chunks_total: int


def read_tree(source_dir, prefix: str = "/") -> dict[str, bytes]:
    root = Path(source_dir)
    if not root.is_dir():
        raise PublishError(f"source_dir not readable: {source_dir}")
    tree, unreadable = {}, []
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            full = Path(dirpath) / name
            rel = full.relative_to(root).as_posix()
            try:
                tree[prefix.rstrip("/") + "/" + rel] = full.read_bytes()
            except OSError:
                unreadable.append(str(full))
    if unreadable:
        raise PublishError("unreadable files: " + ", ".join(sorted(unreadable)))
    return tree


def current_catalog(out_dir) -> Optional[Catalog]:
    path = Path(out_dir) / "catalog.json"
    if not path.is_file():
        return None
    return Catalog.from_bytes(path.read_bytes())


def publish(spec: RepoSpec, prev: Optional[Catalog] = None,
            generated_at: Optional[int] = None) -> PublishResult:
    tree = {normalize_path(k): v for k, v in read_tree(spec.source_dir, spec.prefix).items()}
    if prev is None:
        try:
            prev = current_catalog(spec.out_dir)
        except CatalogError as exc:
            raise PublishError(f"existing catalog unreadable: {exc}") from exc
    try:
        catalog = build_catalog(tree, spec.acl_spec, spec.symlink_spec,
                                prev_revision=prev.revision if prev else 0,
                                acl_members=spec.acl_members, chunk_size=spec.chunk_size,
                                generated_at=generated_at)
    except CatalogError as exc:
        raise PublishError(str(exc)) from exc

    store = ChunkStore(spec.out_dir)
    written = total = 0
    for path, entry in catalog.files.items():
        data = memoryview(tree[path])
        for chunk in entry.chunks:
            total += 1
            if store.write(chunk.sha256, bytes(data[chunk.offset:chunk.end])):
                written += 1
    atomic_write(Path(spec.out_dir) / "catalog.json", catalog.to_bytes())
    log.info("published revision %d: %d files, %d/%d chunks written",
             catalog.revision, len(catalog.files), written, total)
    return PublishResult(catalog, written, total)

