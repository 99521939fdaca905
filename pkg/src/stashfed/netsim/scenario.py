"""Scenario files for the simulator.

A scenario is JSON with ``nodes``, ``links``, ``workload`` and ``seed``.
Node entries reuse the real node config keys; only the ones that matter
to the model are read.  Jobs run on a node with the sim-only role ``site``.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from ..model import DEFAULT_CHUNK_SIZE
from ..origin import DEFAULT_LIMIT_PER_PRINCIPAL, MemoryModel, thread_model

SIM_ROLES = ("origin", "cache", "redirector", "site")


class ScenarioError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid scenario:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class LinkSpec:
    a: str
    b: str
    latency: float
    bandwidth: float
    per_connection_overhead: float = 0.0

    @property
    def key(self) -> frozenset:
        return frozenset((self.a, self.b))


@dataclass
class NodeSpec:
    node_id: str
    role: str
    geo: Optional[tuple] = None
    config: dict = field(default_factory=dict)

    # origin
    @property
    def memory(self) -> MemoryModel:
        mem = self.config.get("memory")
        if not mem:
            return thread_model()
        return MemoryModel(int(mem["per_connection"]), int(mem["cap"]), mem["mode"])

    @property
    def limit_per_principal(self) -> Optional[int]:
        return self.config.get("limit_per_principal", DEFAULT_LIMIT_PER_PRINCIPAL)

    @property
    def recovery_s(self) -> float:
        return float(self.config.get("recovery_s", 60.0))

    # cache
    @property
    def capacity_bytes(self) -> int:
        return int(self.config.get("capacity_bytes", 0))

    # site
    @property
    def per_job_bandwidth(self) -> float:
        value = self.config.get("per_job_bandwidth_Bps")
        return math.inf if value is None else float(value)


@dataclass
class WorkloadSpec:
    n_jobs: int
    startup_rate: float
    file_size: int
    files_per_job: int = 1
    compute_time: float = 0.0
    mode: str = "auto"  # direct | chunked | auto (chunked from caches)
    source_policy: Union[str, list] = "geo"
    site: Optional[str] = None
    n_files: Optional[int] = None
    chunk_size: int = DEFAULT_CHUNK_SIZE
    token: str = "job-token"
    principal: str = "/DC=org/CN=workflow"
    retries: int = 3
    backoff_s: float = 0.5
    start_jitter_s: float = 0.0


@dataclass
class Scenario:
    nodes: dict[str, NodeSpec]
    links: list[LinkSpec]
    workload: WorkloadSpec
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def link(self, a: str, b: str) -> Optional[LinkSpec]:
        key = frozenset((a, b))
        for spec in self.links:
            if spec.key == key:
                return spec
        return None

    def by_role(self, role: str) -> list[NodeSpec]:
        return [n for _, n in sorted(self.nodes.items()) if n.role == role]


_WORKLOAD_FIELDS = set(WorkloadSpec.__dataclass_fields__)


def parse(obj: dict) -> Scenario:
    """Parse and validate; every defect found is reported at once."""
    problems: list[str] = []
    nodes: dict[str, NodeSpec] = {}
    for i, raw in enumerate(obj.get("nodes") or []):
        nid = raw.get("node_id")
        role = raw.get("role")
        if not isinstance(nid, str) or not nid:
            problems.append(f"nodes[{i}].node_id: required")
            continue
        if nid in nodes:
            problems.append(f"nodes[{i}].node_id: duplicate {nid!r}")
        if role not in SIM_ROLES:
            problems.append(f"nodes[{i}].role: expected one of {SIM_ROLES}, got {role!r}")
        geo = raw.get("geo")
        if geo is not None:
            if (not isinstance(geo, (list, tuple)) or len(geo) != 2
                    or not -90 <= geo[0] <= 90 or not -180 <= geo[1] <= 180):
                problems.append(f"nodes[{i}].geo: invalid {geo!r}")
                geo = None
            else:
                geo = (float(geo[0]), float(geo[1]))
        spec = NodeSpec(nid, role, geo, dict(raw))
        if role == "origin":
            try:
                spec.memory
            except (KeyError, ValueError, TypeError) as exc:
                problems.append(f"nodes[{i}].memory: {exc}")
        nodes[nid] = spec
    if not nodes:
        problems.append("nodes: at least one node required")

    links: list[LinkSpec] = []
    seen = set()
    for i, raw in enumerate(obj.get("links") or []):
        try:
            spec = LinkSpec(str(raw["a"]), str(raw["b"]), float(raw.get("latency_s", 0.0)),
                            float(raw["bandwidth_Bps"]), float(raw.get("conn_overhead_s", 0.0)))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"links[{i}]: malformed ({exc})")
            continue
        for end in (spec.a, spec.b):
            if end not in nodes:
                problems.append(f"links[{i}]: unknown node {end!r}")
        if spec.latency < 0:
            problems.append(f"links[{i}].latency_s: must be >= 0")
        if spec.bandwidth <= 0:
            problems.append(f"links[{i}].bandwidth_Bps: must be > 0")
        if spec.per_connection_overhead < 0:
            problems.append(f"links[{i}].conn_overhead_s: must be >= 0")
        if spec.key in seen:
            problems.append(f"links[{i}]: duplicate link {spec.a}-{spec.b}")
        seen.add(spec.key)
        links.append(spec)

    wl_raw = dict(obj.get("workload") or {})
    unknown = sorted(set(wl_raw) - _WORKLOAD_FIELDS)
    if unknown:
        problems.append(f"workload: unknown fields {unknown}")
    for key in ("n_jobs", "startup_rate", "file_size"):
        if key not in wl_raw:
            problems.append(f"workload.{key}: required")
    workload = None
    try:
        workload = WorkloadSpec(**{k: v for k, v in wl_raw.items() if k in _WORKLOAD_FIELDS})
    except TypeError as exc:
        problems.append(f"workload: {exc}")

    scenario = Scenario(nodes, links, workload, int(obj.get("seed", 0)), copy.deepcopy(obj))
    if workload is not None:
        problems += _check_workload(scenario)
    if problems:
        raise ScenarioError(problems)
    return scenario


def _check_workload(sc: Scenario) -> list[str]:
    wl = sc.workload
    out = []
    if not isinstance(wl.n_jobs, int) or wl.n_jobs < 0:
        out.append("workload.n_jobs: expected non-negative integer")
    if not isinstance(wl.startup_rate, (int, float)) or wl.startup_rate <= 0:
        out.append("workload.startup_rate: must be > 0")
    if wl.files_per_job not in (1, 2):
        out.append("workload.files_per_job: must be 1 or 2")
    if not isinstance(wl.file_size, int) or wl.file_size < 0:
        out.append("workload.file_size: expected non-negative integer")
    if wl.chunk_size < 1:
        out.append("workload.chunk_size: must be >= 1")
    if wl.mode not in ("direct", "chunked", "auto"):
        out.append("workload.mode: expected direct, chunked or auto")
    if wl.n_files is not None and wl.n_files < wl.files_per_job:
        out.append("workload.n_files: must be >= files_per_job")

    sites = sc.by_role("site")
    site = wl.site or (sites[0].node_id if len(sites) == 1 else None)
    if site is None:
        out.append("workload.site: required when the scenario has zero or several sites")
    elif site not in sc.nodes or sc.nodes[site].role != "site":
        out.append(f"workload.site: {site!r} is not a site node")
    else:
        wl.site = site

    servers = [n.node_id for n in sc.nodes.values() if n.role in ("origin", "cache")]
    if isinstance(wl.source_policy, list):
        if not wl.source_policy:
            out.append("workload.source_policy: empty source list")
        for nid in wl.source_policy:
            if nid not in sc.nodes or sc.nodes[nid].role not in ("origin", "cache"):
                out.append(f"workload.source_policy: {nid!r} is not an origin or cache")
        policy = [n for n in wl.source_policy if n in sc.nodes]
    elif wl.source_policy == "geo":
        policy = servers
        if not policy:
            out.append("workload.source_policy: no origins or caches to choose from")
        if site in sc.nodes and sc.nodes[site].geo is None:
            out.append(f"nodes.{site}.geo: required for geo source policy")
        for nid in policy:
            if sc.nodes[nid].geo is None:
                out.append(f"nodes.{nid}.geo: required for geo source policy")
    else:
        out.append("workload.source_policy: expected a list of node ids or 'geo'")
        policy = []

    if site in sc.nodes:
        for nid in policy:
            if sc.link(site, nid) is None:
                out.append(f"links: no link between {site!r} and {nid!r}")
    origins = [n.node_id for n in sc.by_role("origin")]
    for nid in policy:
        if nid in sc.nodes and sc.nodes[nid].role == "cache":
            ups = sc.nodes[nid].config.get("origins") or origins
            if not ups:
                out.append(f"nodes.{nid}: cache has no origin")
            for up in ups:
                if up not in sc.nodes:
                    out.append(f"nodes.{nid}.origins: unknown node {up!r}")
                elif sc.link(nid, up) is None:
                    out.append(f"links: no link between {nid!r} and {up!r}")
    return out


def load(path) -> Scenario:
    return parse(json.loads(Path(path).read_text()))


def set_path(obj: dict, dotted: str, value: Any) -> dict:
    """Return a copy of ``obj`` with ``dotted`` (e.g. ``workload.startup_rate``,
    ``nodes.origin.memory.cap`` or ``links.0.bandwidth_Bps``) set to ``value``."""
    out = copy.deepcopy(obj)
    parts = dotted.split(".")
    cur: Any = out
    for i, part in enumerate(parts[:-1]):
        if isinstance(cur, list):
            if part.isdigit():
                cur = cur[int(part)]
            else:
                matches = [n for n in cur if isinstance(n, dict) and n.get("node_id") == part]
                if not matches:
                    raise KeyError(f"no list element {part!r} in {'.'.join(parts[:i + 1])}")
                cur = matches[0]
        else:
            cur = cur.setdefault(part, {})
    last = parts[-1]
    if isinstance(cur, list):
        cur[int(last)] = value
    else:
        cur[last] = value
    return out
