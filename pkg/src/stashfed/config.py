"""JSON node configs: validation and construction of live nodes."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

from .model import Catalog, TokenTable
from .origin import DEFAULT_LIMIT_PER_PRINCIPAL, MemoryModel, Origin, TransferLedger, thread_model
from .store import ChunkStore


class ConfigError(ValueError):
    """Invalid node configuration; the message names every offending field."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file not found: {path}"]) from None
    except ValueError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from None


def _endpoint_ok(value) -> bool:
    if not isinstance(value, str):
        return False
    host, sep, port = value.rpartition(":")
    return bool(sep and host and port.isdigit() and 0 <= int(port) < 65536)


def _check_geo(cfg, problems):
    geo = cfg.get("geo")
    if not isinstance(geo, (list, tuple)) or len(geo) != 2 or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in geo
    ):
        problems.append("geo: expected [latitude, longitude]")
        return
    lat, lon = geo
    if not -90 <= lat <= 90:
        problems.append(f"geo: latitude {lat} outside [-90, 90]")
    if not -180 <= lon <= 180:
        problems.append(f"geo: longitude {lon} outside [-180, 180]")


def _require(cfg, problems, name, kind, optional=False):
    if name not in cfg:
        if not optional:
            problems.append(f"{name}: required")
        return
    value = cfg[name]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        problems.append(f"{name}: expected integer")
    elif kind is not int and not isinstance(value, kind):
        problems.append(f"{name}: expected {kind.__name__}")


def _check_tokens(cfg, problems):
    table = cfg.get("token_table", {})
    if not isinstance(table, dict) or not all(
        isinstance(k, str) and isinstance(v, str) and v for k, v in table.items()
    ):
        problems.append("token_table: expected {token: dn}")


def validate_origin(cfg: Mapping[str, Any]) -> dict:
    problems: list[str] = []
    _require(cfg, problems, "node_id", str)
    if not _endpoint_ok(cfg.get("listen")):
        problems.append("listen: expected host:port")
    _check_geo(cfg, problems)
    _require(cfg, problems, "data_root", str)
    _require(cfg, problems, "catalog", str)
    _check_tokens(cfg, problems)
    limit = cfg.get("limit_per_principal", DEFAULT_LIMIT_PER_PRINCIPAL)
    if limit is not None and (isinstance(limit, bool) or not isinstance(limit, int) or limit < 1):
        problems.append("limit_per_principal: expected positive integer")
    mem = cfg.get("memory")
    if mem is not None:
        if not isinstance(mem, dict):
            problems.append("memory: expected object")
        else:
            if mem.get("mode") not in ("refuse", "crash"):
                problems.append("memory.mode: expected 'refuse' or 'crash'")
            for key in ("per_connection", "cap"):
                v = mem.get(key)
                if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                    problems.append(f"memory.{key}: expected non-negative integer")
    if "redirector" in cfg and cfg["redirector"] is not None and not _endpoint_ok(cfg["redirector"]):
        problems.append("redirector: expected host:port")
    if problems:
        raise ConfigError(problems)
    return dict(cfg)


def validate_cache(cfg: Mapping[str, Any]) -> dict:
    problems: list[str] = []
    _require(cfg, problems, "node_id", str)
    if not _endpoint_ok(cfg.get("listen")):
        problems.append("listen: expected host:port")
    _check_geo(cfg, problems)
    _require(cfg, problems, "cache_root", str)
    _require(cfg, problems, "capacity_bytes", int)
    if isinstance(cfg.get("capacity_bytes"), int) and cfg["capacity_bytes"] < 0:
        problems.append("capacity_bytes: must be >= 0")
    _require(cfg, problems, "cache_token", str)
    _check_tokens(cfg, problems)
    if cfg.get("cache_token") in cfg.get("token_table", {}):
        problems.append("cache_token: must not appear in token_table")
    if cfg.get("redirector") is not None and not _endpoint_ok(cfg["redirector"]):
        problems.append("redirector: expected host:port")
    origins = cfg.get("origins", [])
    if not isinstance(origins, list) or not all(_endpoint_ok(o) for o in origins):
        problems.append("origins: expected list of host:port")
    if not cfg.get("redirector") and not origins:
        problems.append("origins: need at least one origin or a redirector")
    refresh = cfg.get("acl_refresh_seconds", 60)
    if isinstance(refresh, bool) or not isinstance(refresh, (int, float)) or refresh <= 0:
        problems.append("acl_refresh_seconds: expected positive number")
    if problems:
        raise ConfigError(problems)
    return dict(cfg)


def validate_redirector(cfg: Mapping[str, Any]) -> dict:
    problems: list[str] = []
    if not _endpoint_ok(cfg.get("listen")):
        problems.append("listen: expected host:port")
    ttl = cfg.get("ttl_seconds", 30)
    if isinstance(ttl, bool) or not isinstance(ttl, (int, float)) or ttl <= 0:
        problems.append("ttl_seconds: expected positive number")
    if problems:
        raise ConfigError(problems)
    return dict(cfg)


VALIDATORS = {"origin": validate_origin, "cache": validate_cache,
              "redirector": validate_redirector}


def build_origin(cfg: Mapping[str, Any]) -> Origin:
    cfg = validate_origin(cfg)
    mem = cfg.get("memory")
    memory = MemoryModel(mem["per_connection"], mem["cap"], mem["mode"]) if mem else thread_model()
    ledger = TransferLedger(cfg.get("limit_per_principal", DEFAULT_LIMIT_PER_PRINCIPAL), memory)
    catalog = None
    catalog_path = Path(cfg["catalog"])
    if catalog_path.is_file():
        catalog = Catalog.from_bytes(catalog_path.read_bytes())
    return Origin(cfg["node_id"], cfg["listen"], cfg["geo"], ChunkStore(cfg["data_root"]),
                  catalog=catalog, token_table=TokenTable(cfg.get("token_table")),
                  ledger=ledger)
