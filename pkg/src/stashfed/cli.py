"""Command-line entry points: ``fedctl`` and ``fedcp``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading

from . import wire
from .cache import DiskCache
from .client import EXIT_ALL_FAILED, Client, FetchError, parse_sources
from .config import VALIDATORS, ConfigError, load_json
from .launch import STARTERS
from .publish import PublishError, RepoSpec, publish
from .transport import SocketTransport, TransportError


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# -- fedctl ----------------------------------------------------------------------

def _cmd_publish(args) -> int:
    try:
        spec = RepoSpec.from_json(load_json(args.repo))
        result = publish(spec)
    except (ConfigError, PublishError, KeyError) as exc:
        print(f"publish failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({
        "revision": result.catalog.revision,
        "files": len(result.catalog.files),
        "chunks_total": result.chunks_total,
        "chunks_written": result.chunks_written,
    }, sort_keys=True))
    return 0


def _status(endpoint: str) -> int:
    try:
        resp = SocketTransport(timeout=5.0).request(endpoint, wire.Request("GET", "/status"))
    except TransportError as exc:
        print(f"status: {exc}", file=sys.stderr)
        return 1
    if resp.status != 200:
        print(f"status: HTTP {resp.status}", file=sys.stderr)
        return 1
    print(json.dumps(json.loads(resp.body), indent=2, sort_keys=True))
    return 0


def _shutdown(endpoint: str) -> int:
    try:
        resp = SocketTransport(timeout=5.0).request(endpoint, wire.Request("POST", "/shutdown"))
    except TransportError as exc:
        print(f"shutdown: {exc}", file=sys.stderr)
        return 1
    return 0 if resp.status == 200 else 1


def _cmd_node(args) -> int:
    role = args.command
    if len(args.target) == 1:
        action, path = "run", args.target[0]
    elif len(args.target) == 2 and args.target[0] in ("status", "shutdown"):
        action, path = args.target
    else:
        print(f"usage: fedctl {role} [status|shutdown] <config>", file=sys.stderr)
        return 2
    try:
        cfg = VALIDATORS[role](load_json(path))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if action == "status":
        return _status(cfg["listen"])
    if action == "shutdown":
        return _shutdown(cfg["listen"])

    try:
        running = STARTERS[role](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cannot listen on {cfg['listen']}: {exc}", file=sys.stderr)
        return 1
    logging.getLogger("fedctl").info("%s serving on %s", role, running.endpoint)

    def _stop(signum, frame):
        threading.Thread(target=running.stop, daemon=True).start()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    while not running.wait(0.5):
        pass
    return 0


def fedctl_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedctl", description="Operate federation nodes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    pub = sub.add_parser("publish", help="publish a source tree as a repository")
    pub.add_argument("repo", help="repository spec JSON")
    for role in ("origin", "cache", "redirector"):
        sp = sub.add_parser(role, help=f"run, query or stop a {role}")
        sp.add_argument("target", nargs="+", metavar="[status|shutdown] config")
    st = sub.add_parser("status", help="print a node's status JSON")
    st.add_argument("endpoint", help="host:port")
    return p


def fedctl_main(argv=None) -> int:
    args = fedctl_parser().parse_args(argv)
    _setup_logging(args.verbose)
    if args.command == "publish":
        return _cmd_publish(args)
    if args.command == "status":
        return _status(args.endpoint)
    return _cmd_node(args)


# -- fedcp -----------------------------------------------------------------------

def fedcp_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcp", description="Fetch a file from the federation.")
    p.add_argument("path", help="logical path")
    p.add_argument("dest", help="destination file")
    p.add_argument("--token", default=os.environ.get("FED_TOKEN"))
    p.add_argument("--mode", choices=("direct", "chunked"))
    p.add_argument("--sources", default="",
                   help="comma list: host:port (cache), origin=host:port, /local/dir")
    p.add_argument("--geo", help="lat,lon of this client")
    p.add_argument("--redirector", help="host:port")
    p.add_argument("--site-config", help="JSON map of variant name to target path")
    p.add_argument("--local-cache", help=argparse.SUPPRESS)
    p.add_argument("--local-cache-bytes", type=int, default=1 << 30, help=argparse.SUPPRESS)
    p.add_argument("--report", choices=("json", "text"), default="text")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def fedcp_main(argv=None) -> int:
    args = fedcp_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        geo = tuple(float(v) for v in args.geo.split(",")) if args.geo else None
        if geo is not None and len(geo) != 2:
            raise ValueError("--geo expects lat,lon")
        site_config = load_json(args.site_config) if args.site_config else {}
        sources = parse_sources(args.sources)
    except (ValueError, ConfigError) as exc:
        print(f"fedcp: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED
    if not sources and not args.redirector:
        print("fedcp: need --sources or --redirector", file=sys.stderr)
        return EXIT_ALL_FAILED
    local_cache = DiskCache(args.local_cache, args.local_cache_bytes) if args.local_cache else None
    client = Client(SocketTransport(), token=args.token, site_config=site_config, geo=geo,
                    redirector=args.redirector, local_cache=local_cache)
    try:
        report = client.fetch(args.path, args.dest, mode=args.mode, sources=sources)
    except FetchError as exc:
        if args.report == "json":
            print(json.dumps({"ok": False, "exit_code": exc.exit_code,
                              "failures": [str(f) for f in exc.failures],
                              "error": str(exc).splitlines()[0]}, indent=2))
        else:
            print(f"fedcp: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.report == "json":
        print(json.dumps(dict(report.to_json(), ok=True), indent=2, sort_keys=True))
    else:
        print(report.to_text())
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(fedctl_main())
