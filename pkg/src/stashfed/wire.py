"""Minimal HTTP/1.1 subset used between every node.

One request per connection, exact ``Content-Length`` framing, no chunked
transfer encoding.  Ranges provide the chunking.
"""

from __future__ import annotations

import re
from collections.abc import MutableMapping
from dataclasses import dataclass, field
from http import HTTPStatus
from typing import Iterable, Iterator, Optional
from urllib.parse import parse_qs, quote, unquote, urlsplit

METHODS = ("GET", "POST")
TOKEN_HEADER = "X-Fed-Token"
CRLF = b"\r\n"
HEADER_END = b"\r\n\r\n"

_TOKEN_RE = re.compile(rb"^[!#$%&'*+\-.^_`|~0-9A-Za-z]+$")
_RANGE_RE = re.compile(r"^bytes=(\d*)-(\d*)$")
_CONTENT_RANGE_RE = re.compile(r"^bytes (\d+)-(\d+)/(\d+)$")


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class Headers(MutableMapping):
    """Case-insensitive header map that keeps the original spelling and order."""

    def __init__(self, items=None, **kwargs):
        self._items: dict[str, tuple[str, str]] = {}
        if items:
            self.update(items)
        if kwargs:
            self.update(kwargs)

    def __getitem__(self, name):
        return self._items[name.lower()][1]

    def __setitem__(self, name, value):
        self._items[name.lower()] = (name, str(value))

    def __delitem__(self, name):
        del self._items[name.lower()]

    def __iter__(self):
        return (orig for orig, _ in self._items.values())

    def __len__(self):
        return len(self._items)

    def __eq__(self, other):
        if isinstance(other, Headers):
            return {k: v for k, (_, v) in self._items.items()} == {
                k: v for k, (_, v) in other._items.items()
            }
        if isinstance(other, dict):
            return self == Headers(other)
        return NotImplemented

    def __repr__(self):
        return f"Headers({dict(self.items())!r})"

    def copy(self):
        return Headers(self.items())


def _sync_length(headers: Headers, body: bytes, always: bool):
    if body or always:
        headers["Content-Length"] = str(len(body))
    elif "Content-Length" in headers:
        del headers["Content-Length"]


@dataclass(eq=False)
class Request:
    method: str
    target: str
    headers: Headers = field(default_factory=Headers)
    body: bytes = b""

    def __post_init__(self):
        if not isinstance(self.headers, Headers):
            self.headers = Headers(self.headers)
        _sync_length(self.headers, self.body, always=False)

    def __eq__(self, other):
        if not isinstance(other, Request):
            return NotImplemented
        return (self.method, self.target, self.body) == (
            other.method, other.target, other.body
        ) and self.headers == other.headers

    @property
    def path(self) -> str:
        return unquote(urlsplit(self.target).path)

    @property
    def query(self) -> dict[str, str]:
        return {k: v[0] for k, v in parse_qs(urlsplit(self.target).query).items()}

    @property
    def token(self) -> Optional[str]:
        return self.headers.get(TOKEN_HEADER)


@dataclass(eq=False)
class Response:
    """A response.  ``stream`` replaces ``body`` for large payloads.

    When ``stream`` is set the caller must also give ``length``; the server
    writes pieces as they are produced and aborts the connection if the
    iterator raises, so the peer sees a short read.
    """

    status: int
    headers: Headers = field(default_factory=Headers)
    body: bytes = b""
    stream: Optional[Iterable[bytes]] = None
    length: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.headers, Headers):
            self.headers = Headers(self.headers)
        if self.stream is None:
            _sync_length(self.headers, self.body, always=True)
        else:
            if self.length is None:
                raise ValueError("streamed responses need an explicit length")
            self.headers["Content-Length"] = str(self.length)

    def __eq__(self, other):
        if not isinstance(other, Response):
            return NotImplemented
        return (self.status, self.body) == (other.status, other.body) and (
            self.headers == other.headers
        )

    @property
    def ok(self) -> bool:
        return 200 <= self.status < 300

    def iter_body(self) -> Iterator[bytes]:
        if self.stream is None:
            if self.body:
                yield self.body
            return
        try:
            yield from self.stream
        finally:
            close = getattr(self.stream, "close", None)
            if close:
                close()

    def close(self):
        close = getattr(self.stream, "close", None)
        if close:
            close()


def reason(status: int) -> str:
    try:
        return HTTPStatus(status).phrase
    except ValueError:
        return "Unknown"


def _encode_headers(headers: Headers) -> bytes:
    out = bytearray()
    for name, value in headers.items():
        if not _TOKEN_RE.match(name.encode("latin-1")):
            raise ValueError(f"invalid header name {name!r}")
        if "\r" in value or "\n" in value:
            raise ValueError(f"invalid header value for {name!r}")
        out += f"{name}: {value}".encode("latin-1") + CRLF
    return bytes(out)


def encode_request_head(req: Request) -> bytes:
    if req.method not in METHODS:
        raise ValueError(f"unsupported method {req.method!r}")
    if not req.target.startswith("/") or " " in req.target:
        raise ValueError(f"invalid request target {req.target!r}")
    line = f"{req.method} {req.target} HTTP/1.1".encode("latin-1") + CRLF
    return line + _encode_headers(req.headers) + CRLF


def encode_request(req: Request) -> bytes:
    return encode_request_head(req) + req.body


def encode_response_head(resp: Response) -> bytes:
    line = f"HTTP/1.1 {resp.status} {reason(resp.status)}".encode("latin-1") + CRLF
    return line + _encode_headers(resp.headers) + CRLF


def encode_response(resp: Response) -> bytes:
    if resp.stream is not None:
        return encode_response_head(resp) + b"".join(resp.iter_body())
    return encode_response_head(resp) + resp.body


def parse_head(data: bytes) -> tuple[list[str], Headers, int]:
    """Split the start line and headers; returns (start-line parts, headers, body offset)."""
    end = data.find(HEADER_END)
    if end < 0:
        raise ParseError("header block not terminated", len(data))
    lines = data[:end].split(CRLF)
    try:
        start = lines[0].decode("latin-1")
    except UnicodeDecodeError:  # pragma: no cover - latin-1 decodes anything
        raise ParseError("undecodable start line", 0)
    parts = start.split(" ", 2)
    headers = Headers()
    offset = len(lines[0]) + 2
    for raw in lines[1:]:
        name, sep, value = raw.partition(b":")
        if not sep or not _TOKEN_RE.match(name):
            raise ParseError("malformed header line", offset)
        key = name.decode("latin-1")
        if key in headers:
            raise ParseError(f"duplicate header {key}", offset)
        headers[key] = value.strip(b" \t").decode("latin-1")
        offset += len(raw) + 2
    return parts, headers, end + len(HEADER_END)


def _body(data: bytes, headers: Headers, body_at: int) -> bytes:
    raw = headers.get("Content-Length")
    if raw is None:
        length = 0
    else:
        if not raw.isdigit():
            raise ParseError("invalid Content-Length", body_at)
        length = int(raw)
    body = data[body_at:]
    if len(body) < length:
        raise ParseError(
            f"body shorter than Content-Length ({len(body)} < {length})", len(data)
        )
    if len(body) > length:
        raise ParseError("trailing bytes after body", body_at + length)
    return body


def decode_request(data: bytes) -> Request:
    parts, headers, body_at = parse_head(data)
    if len(parts) != 3 or parts[2] != "HTTP/1.1":
        raise ParseError("malformed request line", 0)
    method, target, _ = parts
    if method not in METHODS:
        raise ParseError(f"unsupported method {method!r}", 0)
    if not target.startswith("/"):
        raise ParseError("request target must be origin-form", len(method) + 1)
    body = _body(data, headers, body_at)
    if not body and "Content-Length" in headers and headers["Content-Length"] != "0":
        raise ParseError("Content-Length on empty body", body_at)
    return Request(method, target, headers, body)


def decode_response(data: bytes) -> Response:
    parts, headers, body_at = parse_head(data)
    if len(parts) < 2 or parts[0] != "HTTP/1.1" or not parts[1].isdigit():
        raise ParseError("malformed status line", 0)
    if "Content-Length" not in headers:
        raise ParseError("response without Content-Length", body_at)
    return Response(int(parts[1]), headers, _body(data, headers, body_at))


def head_length(data: bytes) -> Optional[int]:
    """Offset just past the header block, or None if it is not complete yet."""
    end = data.find(HEADER_END)
    return None if end < 0 else end + len(HEADER_END)


# -- helpers shared by handlers -------------------------------------------------

def data_target(path: str) -> str:
    return "/data" + quote(path)


def stat_target(path: str) -> str:
    return "/stat" + quote(path)


def locate_target(path: str) -> str:
    return "/locate?path=" + quote(path, safe="")


def range_header(start: int, end: int) -> str:
    """Range header value for the half-open byte range [start, end)."""
    return f"bytes={start}-{end - 1}"


def parse_range(value: str, size: int) -> tuple[int, int]:
    """Parse a single ``bytes=`` range into a half-open [start, end) pair.

    Raises ValueError for malformed or unsatisfiable ranges.
    """
    m = _RANGE_RE.match(value.strip())
    if not m or (not m.group(1) and not m.group(2)):
        raise ValueError(f"malformed range {value!r}")
    first, last = m.group(1), m.group(2)
    if not first:
        n = int(last)
        if n == 0:
            raise ValueError("empty suffix range")
        return max(0, size - n), size
    start = int(first)
    end = size if not last else min(int(last) + 1, size)
    if start >= size or (last and int(last) < start):
        raise ValueError(f"unsatisfiable range {value!r} for size {size}")
    return start, end


def content_range(start: int, end: int, total: int) -> str:
    return f"bytes {start}-{end - 1}/{total}"


def parse_content_range(value: str) -> tuple[int, int, int]:
    m = _CONTENT_RANGE_RE.match(value.strip())
    if not m:
        raise ValueError(f"malformed Content-Range {value!r}")
    a, b, total = map(int, m.groups())
    return a, b + 1, total


def json_response(status: int, payload: bytes) -> Response:
    return Response(status, Headers({"Content-Type": "application/json"}), payload)


def error_response(status: int, message: str = "") -> Response:
    body = (message or reason(status)).encode()
    return Response(status, Headers({"Content-Type": "text/plain"}), body)
