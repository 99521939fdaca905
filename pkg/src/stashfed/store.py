"""Content-addressed chunk storage: ``<root>/data/<hex[0:2]>/<sha256>``."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterator, Optional


class ChunkStore:
    def __init__(self, root):
        self.root = Path(root)
        self.data_dir = self.root / "data"
        self.writes = 0

    def path_for(self, digest: str) -> Path:
        return self.data_dir / digest[:2] / digest

    def has(self, digest: str) -> bool:
        return self.path_for(digest).is_file()

    def read(self, digest: str, start: int = 0, end: Optional[int] = None) -> bytes:
        with open(self.path_for(digest), "rb") as fh:
            fh.seek(start)
            return fh.read() if end is None else fh.read(end - start)

    def write(self, digest: str, data: bytes) -> bool:
        """Store ``data`` atomically; returns False when it was already present."""
        target = self.path_for(digest)
        if target.is_file():
            return False
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, target)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise
        self.writes += 1
        return True

    def delete(self, digest: str):
        try:
            self.path_for(digest).unlink()
        except FileNotFoundError:
            pass

    def scan(self) -> Iterator[tuple[str, int, float]]:
        """Yield (digest, size, mtime) for every stored chunk."""
        if not self.data_dir.is_dir():
            return
        for sub in sorted(self.data_dir.iterdir()):
            if not sub.is_dir():
                continue
            for f in sorted(sub.iterdir()):
                if f.name.startswith(".tmp-") or not f.is_file():
                    continue
                st = f.stat()
                yield f.name, st.st_size, st.st_mtime


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
