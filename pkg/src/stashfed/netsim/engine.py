"""Virtual-time discrete-event engine.

Jobs are generator processes that yield events.  Data moves as fluid flows
over links, with max-min fair rates recomputed whenever a flow starts or
finishes.  Origins admit connections through the real ``TransferLedger``,
caches track contents with the real ``CacheIndex``, and requests are
encoded and decoded with the real wire codec before a node acts on them.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import random
from typing import Any, Callable, Generator, Iterable

from .. import wire
from ..cache import CacheIndex
from ..geo import haversine_km
from ..model import TokenTable
from ..origin import Admission, TransferLedger
from .fairness import max_min_rates
from .scenario import LinkSpec, NodeSpec, Scenario

_REL = 1e-12


class Event:
    """Something a process can wait for.  ``value`` is delivered on resume."""

    __slots__ = ("sim", "callbacks", "triggered", "value")

    def __init__(self, sim: "Simulation"):
        self.sim = sim
        self.callbacks: list[Callable[[Any], None]] = []
        self.triggered = False
        self.value = None

    def succeed(self, value=None):
        if self.triggered:
            return
        self.triggered = True
        self.value = value
        for cb in self.callbacks:
            self.sim.schedule(0.0, cb, value)
        self.callbacks.clear()

    def add_callback(self, cb):
        if self.triggered:
            self.sim.schedule(0.0, cb, self.value)
        else:
            self.callbacks.append(cb)


class Process(Event):
    __slots__ = ("gen",)

    def __init__(self, sim, gen: Generator):
        super().__init__(sim)
        self.gen = gen
        sim.schedule(0.0, self._resume, None)

    def _resume(self, value):
        try:
            ev = self.gen.send(value)
        except StopIteration as stop:
            self.succeed(stop.value)
            return
        ev.add_callback(self._resume)


class Link:
    def __init__(self, spec: LinkSpec):
        self.spec = spec
        self.id = f"{spec.a}-{spec.b}"
        self.latency = spec.latency
        self.bandwidth = spec.bandwidth
        self.overhead = spec.per_connection_overhead
        self.flows: set = set()
        self.demand_sum = 0.0
        self.bytes_carried = 0.0
        self.peak_flows = 0

    @property
    def congested(self) -> bool:
        return self.demand_sum > self.bandwidth * (1 + 1e-9)


class Flow:
    def __init__(self, fid: int, links: tuple, size: float, demand: float):
        self.id = fid
        self.links = links
        self.size = float(size)
        self.remaining = float(size)
        self.eff_demand = min([demand] + [l.bandwidth for l in links])
        self.rate = 0.0
        self.last_t = 0.0
        self.version = 0
        self.done = None  # Event


class Simulation:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()
        self._flow_ids = itertools.count()
        self.links = {spec.key: Link(spec) for spec in scenario.links}
        self.flows: dict[int, Flow] = {}
        self._congested = 0
        self.rng = random.Random(scenario.seed)
        self.nodes: dict[str, Any] = {}
        for nid, spec in sorted(scenario.nodes.items()):
            if spec.role == "origin":
                self.nodes[nid] = SimOrigin(self, spec)
            elif spec.role == "cache":
                self.nodes[nid] = SimCache(self, spec)
        self.jobs: list[dict] = []
        self.events_processed = 0

    # -- scheduling -----------------------------------------------------------

    def schedule(self, delay: float, fn, *args):
        heapq.heappush(self._queue, (self.now + delay, next(self._seq), fn, args))

    def timeout(self, delay: float) -> Event:
        ev = Event(self)
        self.schedule(max(0.0, delay), ev.succeed, None)
        return ev

    def process(self, gen) -> Process:
        return Process(self, gen)

    def run_until_idle(self):
        while self._queue:
            t, _, fn, args = heapq.heappop(self._queue)
            self.now = t
            self.events_processed += 1
            fn(*args)

    def link(self, a: str, b: str) -> Link:
        return self.links[frozenset((a, b))]

    # -- fluid flows ----------------------------------------------------------

    def transfer(self, links: Iterable[Link], size: float, demand: float = math.inf) -> Flow:
        """Start a flow; ``flow.done`` fires with True on completion, False if aborted."""
        flow = Flow(next(self._flow_ids), tuple(links), size, demand)
        flow.last_t = self.now
        flow.done = Event(self)
        if size <= 0:
            flow.done.succeed(True)
            return flow
        was_calm = self._congested == 0
        self.flows[flow.id] = flow
        for link in flow.links:
            before = link.congested
            link.flows.add(flow)
            link.peak_flows = max(link.peak_flows, len(link.flows))
            link.demand_sum += flow.eff_demand
            self._congested += link.congested - before
        if was_calm and self._congested == 0:
            self._set_rate(flow, flow.eff_demand)
        else:
            self._reallocate()
        return flow

    def abort(self, flow: Flow):
        if flow.id in self.flows:
            self._remove(flow)
            flow.done.succeed(False)

    def _remove(self, flow: Flow):
        self._advance(flow)
        was_calm = self._congested == 0
        del self.flows[flow.id]
        for link in flow.links:
            before = link.congested
            link.flows.discard(flow)
            link.demand_sum -= flow.eff_demand
            if not link.flows:
                link.demand_sum = 0.0
            link.bytes_carried += flow.size - flow.remaining
            self._congested += link.congested - before
        flow.version += 1
        if not (was_calm and self._congested == 0):
            self._reallocate()

    def _advance(self, flow: Flow):
        flow.remaining = max(0.0, flow.remaining - flow.rate * (self.now - flow.last_t))
        flow.last_t = self.now

    def _set_rate(self, flow: Flow, rate: float):
        self._advance(flow)
        flow.rate = rate
        flow.version += 1
        if rate > 0:
            self.schedule(flow.remaining / rate, self._complete, flow, flow.version)

    def _reallocate(self):
        flows = [self.flows[k] for k in sorted(self.flows)]
        capacity = {}
        for f in flows:
            for link in f.links:
                capacity[link.id] = link.bandwidth
        rates = max_min_rates([(tuple(l.id for l in f.links), f.eff_demand) for f in flows],
                              capacity)
        for f, r in zip(flows, rates):
            if abs(r - f.rate) > _REL * max(1.0, r):
                self._set_rate(f, r)

    def _complete(self, flow: Flow, version: int):
        if version != flow.version or flow.id not in self.flows:
            return
        flow.remaining = 0.0
        self._remove(flow)
        flow.remaining = 0.0
        flow.done.succeed(True)


# -- nodes ----------------------------------------------------------------------

class SimOrigin:
    def __init__(self, sim: Simulation, spec: NodeSpec):
        self.sim = sim
        self.spec = spec
        self.node_id = spec.node_id
        self.ledger = TransferLedger(spec.limit_per_principal, spec.memory)
        tokens = {sim.scenario.workload.token: sim.scenario.workload.principal}
        for cache in sim.scenario.by_role("cache"):
            tokens[cache_token(cache.node_id)] = cache_dn(cache.node_id)
        tokens.update(spec.config.get("token_table") or {})
        self.tokens = TokenTable(tokens)
        self.active: dict[int, tuple] = {}  # flow id -> (flow, ticket)
        self.down_until = -1.0
        self.bytes_served = 0.0
        self.timeline: list[tuple[float, int]] = [(0.0, 0)]
        self.refused = 0

    @property
    def up(self) -> bool:
        return not self.ledger.crashed

    def _record(self):
        self.timeline.append((self.sim.now, self.ledger.total))

    def admit(self, raw_request: bytes):
        """Run admission for an encoded data request; returns (status, ticket)."""
        req = wire.decode_request(raw_request)
        principal = self.tokens.lookup(req.token)
        if principal is None:
            return 401, None
        verdict, ticket = self.ledger.admit(principal)
        if verdict is Admission.ADMITTED:
            self._record()
            return 206 if "Range" in req.headers else 200, ticket
        if verdict is Admission.OVER_LIMIT:
            self.refused += 1
            return 429, None
        if verdict is Admission.OUT_OF_MEMORY:
            self.refused += 1
            return 503, None
        if self.ledger.crashed and self.down_until < self.sim.now:
            self._crash()
        return None, None  # process is gone: connection refused

    def _crash(self):
        self.down_until = self.sim.now + self.spec.recovery_s
        for flow, _ in list(self.active.values()):
            self.sim.abort(flow)
        self.active.clear()
        self._record()
        self.sim.schedule(self.spec.recovery_s, self._restart)

    def _restart(self):
        self.ledger.restart()
        self._record()

    def serve(self, links, size, demand, ticket) -> Flow:
        flow = self.sim.transfer(links, size, demand)
        self.active[flow.id] = (flow, ticket)
        flow.done.add_callback(lambda ok, f=flow: self._finished(f, ticket))
        return flow

    def _finished(self, flow: Flow, ticket):
        self.active.pop(flow.id, None)
        self.bytes_served += flow.size - flow.remaining
        self.ledger.release(ticket)
        self._record()

    def steady_connections(self, t0: float, t1: float) -> float:
        """Time-weighted mean of active connections over [t0, t1]."""
        if t1 <= t0:
            return float(self.ledger.total)
        area = 0.0
        pts = self.timeline
        for (ta, n), (tb, _) in zip(pts, pts[1:] + [(math.inf, 0)]):
            lo, hi = max(ta, t0), min(tb, t1)
            if hi > lo:
                area += n * (hi - lo)
        return area / (t1 - t0)

    def metrics(self) -> dict:
        snap = self.ledger.snapshot()
        return {
            "role": "origin",
            "peak_memory": snap["peak_memory"],
            "peak_connections": snap["peak_total"],
            "bytes_served": self.bytes_served,
            "crash_events": snap["crash_events"],
            "refusals": self.refused,
        }


def cache_token(node_id: str) -> str:
    return f"cache-token:{node_id}"


def cache_dn(node_id: str) -> str:
    return f"/DC=org/CN=cache-{node_id}"


class SimCache:
    def __init__(self, sim: Simulation, spec: NodeSpec):
        self.sim = sim
        self.spec = spec
        self.node_id = spec.node_id
        self.index = CacheIndex(spec.capacity_bytes, clock=lambda: sim.now)
        self.inflight: dict[str, Event] = {}
        self.hits = 0
        self.misses = 0
        self.origin_fetches = 0
        self.bytes_served = 0.0
        self.connections = 0
        self.peak_connections = 0
        ups = spec.config.get("origins") or [n.node_id for n in sim.scenario.by_role("origin")]
        if spec.geo is not None:
            ups = sorted(ups, key=lambda u: (
                haversine_km(spec.geo, sim.scenario.nodes[u].geo)
                if sim.scenario.nodes[u].geo else math.inf, u))
        self.upstreams = ups

    def prewarm(self, chunks: Iterable[tuple[str, int]]):
        for digest, size in chunks:
            if size <= self.index.capacity:
                self.index.admit(digest, size)

    def open(self):
        self.connections += 1
        self.peak_connections = max(self.peak_connections, self.connections)

    def close(self):
        self.connections -= 1

    def metrics(self) -> dict:
        total = self.hits + self.misses
        return {
            "role": "cache",
            "peak_memory": 0,
            "peak_connections": self.peak_connections,
            "bytes_served": self.bytes_served,
            "hit_ratio": self.hits / total if total else 0.0,
            "origin_fetches": self.origin_fetches,
        }


# -- workload --------------------------------------------------------------------

def chunk_layout(size: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(off, min(chunk_size, size - off)) for off in range(0, size, chunk_size)]


class Runner:
    """Drives the workload of a scenario and produces metrics."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.sim = Simulation(scenario)
        wl = scenario.workload
        self.wl = wl
        self.site = scenario.nodes[wl.site]
        self.layout = chunk_layout(wl.file_size, wl.chunk_size)
        n_files = wl.n_files or wl.files_per_job
        self.files = [f"/frames/file{i:05d}.gwf" for i in range(n_files)]
        self.sources = self._source_order()
        for nid, node in self.sim.nodes.items():
            if isinstance(node, SimCache) and node.spec.config.get("prewarm"):
                node.prewarm((self.digest(f, i), size) for f in self.files
                             for i, (_, size) in enumerate(self.layout))
        self.received = 0.0

    def digest(self, path: str, idx: int) -> str:
        return f"{path}#{idx}"

    def _source_order(self) -> list[str]:
        policy = self.wl.source_policy
        if isinstance(policy, list):
            return list(policy)
        nodes = self.sc.nodes
        def key(nid):
            return (haversine_km(self.site.geo, nodes[nid].geo), nid)
        caches = sorted((n for n in nodes if nodes[n].role == "cache"), key=key)
        origins = sorted((n for n in nodes if nodes[n].role == "origin"), key=key)
        return caches + origins

    def run(self) -> dict:
        wl = self.wl
        for j in range(wl.n_jobs):
            start = j / wl.startup_rate
            if wl.start_jitter_s:
                start += self.sim.rng.uniform(0.0, wl.start_jitter_s)
            files = self.sim.rng.sample(self.files, wl.files_per_job)
            rec = {"job": j, "start": start, "files": files, "retries": 0, "source": None,
                   "transfer_time": 0.0, "wait": None, "end": None, "failed": False,
                   "cause": None}
            self.sim.jobs.append(rec)
            self.sim.schedule(start, self._launch, rec)
        self.sim.run_until_idle()
        return self.metrics()

    def _launch(self, rec):
        self.sim.process(self._job(rec))

    # job process
    def _job(self, rec):
        sim = self.sim
        t0 = sim.now
        for path in rec["files"]:
            ok = yield sim.process(self._fetch(rec, path))
            if not ok:
                rec["failed"] = True
                rec["end"] = sim.now
                rec["wait"] = sim.now - t0
                return
        rec["wait"] = sim.now - t0
        yield sim.timeout(self.wl.compute_time)
        rec["end"] = sim.now

    def _fetch(self, rec, path):
        have: set[int] = set()
        n = len(self.layout)
        if n == 0:
            return True
        for src in self.sources:
            node = self.sim.nodes[src]
            mode = self.wl.mode
            if mode == "auto":
                mode = "chunked" if isinstance(node, SimCache) else "direct"
            if mode == "direct":
                pending = [[i for i in range(n) if i not in have]]
            else:
                pending = [[i] for i in range(n) if i not in have]
            failed = False
            for group in pending:
                ok = yield self.sim.process(self._request(rec, node, path, group))
                if not ok:
                    failed = True
                    break
                have.update(group)
                rec["source"] = src
            if not failed:
                return True
        rec["cause"] = "all sources failed"
        return False

    def _request(self, rec, node, path, group):
        """One connection to ``node`` for chunks ``group``; retries 429/503."""
        sim, wl = self.sim, self.wl
        link = sim.link(self.site.node_id, node.node_id)
        start = self.layout[group[0]][0]
        end = self.layout[group[-1]][0] + self.layout[group[-1]][1]
        headers = {wire.TOKEN_HEADER: wl.token}
        if len(group) != len(self.layout):
            headers["Range"] = wire.range_header(start, end)
        raw = wire.encode_request(wire.Request("GET", wire.data_target(path), headers))
        attempt = 0
        while True:
            t_req = sim.now
            yield sim.timeout(link.overhead + link.latency)
            if isinstance(node, SimOrigin):
                status, ticket = node.admit(raw)
                if status in (200, 206):
                    flow = node.serve([link], end - start, self.site.per_job_bandwidth, ticket)
                    ok = yield flow.done
                    yield sim.timeout(link.latency)
                    if ok:
                        self.received += end - start
                        rec["transfer_time"] += sim.now - t_req
                        return True
                    return False  # aborted mid-stream
            else:
                status = yield sim.process(self._cache_serve(node, link, path, group, raw))
                if status is True:
                    yield sim.timeout(link.latency)
                    self.received += end - start
                    rec["transfer_time"] += sim.now - t_req
                    return True
                if status is False:
                    return False
            yield sim.timeout(link.latency)
            if status in (429, 503) and attempt < wl.retries:
                rec["retries"] += 1
                yield sim.timeout(wl.backoff_s * 2 ** attempt)
                attempt += 1
                continue
            return False

    def _cache_serve(self, cache: SimCache, link: Link, path, group, raw):
        """Returns True when all bytes were delivered, False on a mid-stream abort,
        or a status code when the request was refused before any data."""
        sim = self.sim
        wire.decode_request(raw)
        cache.open()
        try:
            for pos, idx in enumerate(group):
                digest = self.digest(path, idx)
                size = self.layout[idx][1]
                while digest not in cache.index and digest in cache.inflight:
                    yield cache.inflight[digest]
                if digest in cache.index:
                    cache.hits += 1
                    cache.index.touch(digest)
                    flow = sim.transfer([link], size, self.site.per_job_bandwidth)
                    ok = yield flow.done
                    if not ok:
                        return False
                    cache.bytes_served += size
                    continue
                cache.misses += 1
                done = Event(sim)
                cache.inflight[digest] = done
                try:
                    ok = yield sim.process(self._miss(cache, link, path, idx))
                finally:
                    del cache.inflight[digest]
                    done.succeed(None)
                if not ok:
                    return 502 if pos == 0 else False
                cache.bytes_served += size
            return True
        finally:
            cache.close()

    def _miss(self, cache: SimCache, down: Link, path, idx):
        """Stream one chunk from an upstream origin through the cache."""
        sim = self.sim
        off, size = self.layout[idx]
        raw = wire.encode_request(wire.Request("GET", wire.data_target(path), {
            wire.TOKEN_HEADER: cache_token(cache.node_id),
            "Range": wire.range_header(off, off + size),
        }))
        for up_id in cache.upstreams:
            origin = sim.nodes[up_id]
            up = sim.link(cache.node_id, up_id)
            yield sim.timeout(up.overhead + up.latency)
            status, ticket = origin.admit(raw)
            if status not in (200, 206):
                yield sim.timeout(up.latency)
                continue
            cache.origin_fetches += 1
            flow = origin.serve([up, down], size, self.site.per_job_bandwidth, ticket)
            ok = yield flow.done
            if not ok:
                continue
            yield sim.timeout(up.latency)
            if size <= cache.index.capacity:
                cache.index.admit(self.digest(path, idx), size)
            return True
        return False

    # -- metrics -----------------------------------------------------------------

    def metrics(self) -> dict:
        jobs = self.sim.jobs
        done = [j for j in jobs if j["end"] is not None]
        per_job = [{
            "job": j["job"],
            "start": _r(j["start"]),
            "wait": _r(j["wait"]),
            "transfer_time": _r(j["transfer_time"]),
            "retries": j["retries"],
            "source": j["source"],
            "failed": j["failed"],
        } for j in jobs]
        nodes = {nid: node.metrics() for nid, node in sorted(self.sim.nodes.items())}
        for m in nodes.values():
            for k, v in list(m.items()):
                if isinstance(v, float):
                    m[k] = _r(v)
        return {
            "jobs": per_job,
            "nodes": nodes,
            "links": {l.id: {"bytes_carried": _r(l.bytes_carried), "peak_flows": l.peak_flows}
                      for _, l in sorted(self.sim.links.items(), key=lambda kv: kv[1].id)},
            "global": {
                "jobs": len(jobs),
                "failed_jobs": sum(j["failed"] for j in jobs),
                "makespan": _r(max((j["end"] for j in done), default=0.0)),
                "bytes_received": _r(self.received),
                "events": self.sim.events_processed,
            },
            "seed": self.sc.seed,
        }


def _r(x):
    return None if x is None else round(float(x), 9)


def run(scenario: Scenario) -> dict:
    """Run ``scenario`` to completion and return its metrics."""
    return Runner(scenario).run()


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2)
