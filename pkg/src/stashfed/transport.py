"""Two ways to move wire messages: real sockets and in-process calls.

Nodes only ever see ``Request -> Response`` handlers and a transport with a
``request(endpoint, req)`` method, so the same node logic runs behind a
loopback TCP server, inside tests, or inside the simulator.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from collections import Counter
from typing import Callable, Dict, Optional

from . import wire

log = logging.getLogger(__name__)

Handler = Callable[[wire.Request], wire.Response]

READ_SIZE = 64 * 1024
MAX_HEAD = 64 * 1024


class TransportError(Exception):
    """Base class for connection-level failures."""


class ConnectionFailed(TransportError):
    pass


class ShortRead(TransportError):
    def __init__(self, partial: bytes, expected: int):
        super().__init__(f"connection closed after {len(partial)} of {expected} bytes")
        self.partial = partial
        self.expected = expected


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


class _Counting:
    def __init__(self):
        self._lock = threading.Lock()
        self.connections: Counter = Counter()

    def _count(self, endpoint: str):
        with self._lock:
            self.connections[endpoint] += 1

    def total_connections(self) -> int:
        with self._lock:
            return sum(self.connections.values())


class SocketTransport(_Counting):
    """Blocking client: one TCP connection per request."""

    def __init__(self, timeout: float = 30.0):
        super().__init__()
        self.timeout = timeout

    def request(self, endpoint: str, req: wire.Request,
                timeout: Optional[float] = None) -> wire.Response:
        host, port = split_endpoint(endpoint)
        self._count(endpoint)
        try:
            sock = socket.create_connection((host, port), timeout=timeout or self.timeout)
        except OSError as exc:
            raise ConnectionFailed(f"{endpoint}: {exc}") from exc
        with sock:
            try:
                sock.sendall(wire.encode_request(req))
                return _read_response(sock)
            except (OSError, socket.timeout) as exc:
                raise ConnectionFailed(f"{endpoint}: {exc}") from exc


def _read_response(sock: socket.socket) -> wire.Response:
    buf = bytearray()
    while (cut := wire.head_length(buf)) is None:
        piece = sock.recv(READ_SIZE)
        if not piece:
            raise ConnectionFailed("connection closed before response head")
        buf += piece
        if len(buf) > MAX_HEAD and wire.head_length(buf) is None:
            raise ConnectionFailed("response head too large")
    head = bytes(buf[:cut])
    _, headers, _ = wire.parse_head(head)
    if "Content-Length" not in headers:
        raise ConnectionFailed("response without Content-Length")
    expected = int(headers["Content-Length"])
    body = bytearray(buf[cut:])
    while len(body) < expected:
        try:
            piece = sock.recv(min(READ_SIZE, expected - len(body)))
        except ConnectionResetError:
            piece = b""
        if not piece:
            raise ShortRead(bytes(body), expected)
        body += piece
    return wire.decode_response(head + bytes(body[:expected]))


class LocalTransport(_Counting):
    """In-process transport; messages still pass through the codec.

    ``down`` holds endpoints that refuse connections.
    """

    def __init__(self, handlers: Optional[Dict[str, Handler]] = None):
        super().__init__()
        self.handlers: Dict[str, Handler] = dict(handlers or {})
        self.down: set[str] = set()

    def register(self, endpoint: str, handler: Handler):
        self.handlers[endpoint] = handler

    def request(self, endpoint: str, req: wire.Request,
                timeout: Optional[float] = None) -> wire.Response:
        self._count(endpoint)
        handler = self.handlers.get(endpoint)
        if handler is None or endpoint in self.down:
            raise ConnectionFailed(f"{endpoint}: connection refused")
        resp = handler(wire.decode_request(wire.encode_request(req)))
        expected = int(resp.headers["Content-Length"])
        body = bytearray()
        try:
            for piece in resp.iter_body():
                body += piece
        except Exception as exc:
            log.debug("stream from %s aborted: %s", endpoint, exc)
            raise ShortRead(bytes(body), expected) from exc
        if len(body) < expected:
            raise ShortRead(bytes(body), expected)
        head = wire.encode_response_head(resp)
        return wire.decode_response(head + bytes(body))


# -- server --------------------------------------------------------------------

class _RequestHandler(socketserver.BaseRequestHandler):
    server: "NodeServer"

    def handle(self):
        sock = self.request
        sock.settimeout(self.server.io_timeout)
        try:
            raw = self._read_request(sock)
        except wire.ParseError as exc:
            self._send_plain(sock, wire.error_response(400, str(exc)))
            return
        except (OSError, ConnectionError):
            return
        if raw is None:
            return
        try:
            req = wire.decode_request(raw)
        except wire.ParseError as exc:
            self._send_plain(sock, wire.error_response(400, str(exc)))
            return
        if req.method == "POST" and req.path == "/shutdown" and self.server.on_shutdown:
            if self.client_address[0] not in ("127.0.0.1", "::1"):
                self._send_plain(sock, wire.error_response(403, "shutdown only from loopback"))
                return
            self._send_plain(sock, wire.json_response(200, b'{"shutdown":true}'))
            threading.Thread(target=self.server.on_shutdown, daemon=True).start()
            return
        try:
            resp = self.server.app(req)
        except Exception:
            log.exception("handler failed for %s %s", req.method, req.target)
            resp = wire.error_response(500)
        self._send(sock, resp)

    def _read_request(self, sock) -> Optional[bytes]:
        buf = bytearray()
        while (cut := wire.head_length(buf)) is None:
            piece = sock.recv(READ_SIZE)
            if not piece:
                return None if not buf else bytes(buf)
            buf += piece
            if len(buf) > MAX_HEAD and wire.head_length(buf) is None:
                raise wire.ParseError("request head too large", len(buf))
        _, headers, _ = wire.parse_head(bytes(buf[:cut]))
        length = int(headers.get("Content-Length", "0") or 0)
        while len(buf) - cut < length:
            piece = sock.recv(READ_SIZE)
            if not piece:
                break
            buf += piece
        return bytes(buf)

    def _send_plain(self, sock, resp):
        try:
            sock.sendall(wire.encode_response(resp))
        except OSError:
            pass

    def _send(self, sock, resp: wire.Response):
        pacer = _Pacer(self.server.rate_limit_Bps)
        try:
            sock.sendall(wire.encode_response_head(resp))
            for piece in resp.iter_body():
                for off in range(0, len(piece), READ_SIZE):
                    part = piece[off:off + READ_SIZE]
                    pacer.wait(len(part))
                    sock.sendall(part)
        except Exception as exc:
            # abort: the peer must observe a short read, not a clean close
            log.info("aborting response stream: %s", exc)
            try:
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER,
                                b"\x01\x00\x00\x00\x00\x00\x00\x00")
            except OSError:
                pass
        finally:
            resp.close()


class _Pacer:
    def __init__(self, rate: Optional[float]):
        self.rate = rate
        self.sent = 0
        self.t0 = time.monotonic()

    def wait(self, n: int):
        if not self.rate:
            return
        self.sent += n
        due = self.t0 + self.sent / self.rate
        delay = due - time.monotonic()
        if delay > 0:
            time.sleep(delay)


class NodeServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    """Threaded TCP server feeding decoded requests to ``app``."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, endpoint: str, app: Handler, rate_limit_Bps: Optional[float] = None,
                 io_timeout: float = 60.0, on_shutdown: Optional[Callable[[], None]] = None):
        host, port = split_endpoint(endpoint)
        self.app = app
        self.on_shutdown = on_shutdown
        self.rate_limit_Bps = rate_limit_Bps
        self.io_timeout = io_timeout
        super().__init__((host, port), _RequestHandler)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name=f"server-{self.endpoint}",
                                  daemon=True)
        thread.start()
        return thread

    def stop(self):
        self.shutdown()
        self.server_close()
