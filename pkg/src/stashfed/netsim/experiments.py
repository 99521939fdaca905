"""Ready-made scenarios: access-method timings and job ramp-up.

Link figures for the access-method scenario are calibration targets for a
437 MB file moved to a worker node: about 4.0 MB/s from the remote origin
over the WAN and about 46 MB/s from a warm site cache.  The per-connection
overhead is the one free parameter; :func:`fit_connection_overhead`
solves for it from the chunked-cached timing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

from ..model import DEFAULT_CHUNK_SIZE
from ..origin import GiB, KiB, MiB
from . import engine
from .scenario import parse

MB = 1_000_000

FILE_SIZE = 437 * MB
WAN_BPS = 4.0 * MB
LAN_BPS = 46.0 * MB
WAN_LATENCY = 0.015
LAN_LATENCY = 0.0005
CHUNKED_TARGET_S = 13.7

SITE_GEO = [43.05, -76.15]    # Syracuse
ORIGIN_GEO = [40.81, -96.70]  # Lincoln


def access_scenario(method: str, overhead: float, file_size: int = FILE_SIZE,
                    chunk_size: int = DEFAULT_CHUNK_SIZE, seed: int = 0) -> dict:
    """Single job, single file.  ``method`` is one of remote, cached, chunked."""
    if method not in ("remote", "cached", "chunked"):
        raise ValueError(f"unknown access method {method!r}")
    source = "origin" if method == "remote" else "cache"
    mode = "chunked" if method == "chunked" else "direct"
    return {
        "nodes": [
            {"node_id": "origin", "role": "origin", "geo": ORIGIN_GEO},
            {"node_id": "cache", "role": "cache", "geo": SITE_GEO, "prewarm": True,
             "capacity_bytes": 4 * file_size + chunk_size},
            {"node_id": "worker", "role": "site", "geo": SITE_GEO},
        ],
        "links": [
            {"a": "worker", "b": "origin", "latency_s": WAN_LATENCY, "bandwidth_Bps": WAN_BPS,
             "conn_overhead_s": overhead},
            {"a": "worker", "b": "cache", "latency_s": LAN_LATENCY, "bandwidth_Bps": LAN_BPS,
             "conn_overhead_s": overhead},
            {"a": "cache", "b": "origin", "latency_s": WAN_LATENCY, "bandwidth_Bps": WAN_BPS,
             "conn_overhead_s": overhead},
        ],
        "workload": {"n_jobs": 1, "startup_rate": 1.0, "file_size": file_size,
                     "chunk_size": chunk_size, "mode": mode, "source_policy": [source]},
        "seed": seed,
    }


def access_time(method: str, overhead: float, file_size: int = FILE_SIZE,
                chunk_size: int = DEFAULT_CHUNK_SIZE) -> float:
    metrics = engine.run(parse(access_scenario(method, overhead, file_size, chunk_size)))
    job = metrics["jobs"][0]
    if job["failed"]:
        raise RuntimeError(f"{method} transfer failed in simulation")
    return job["transfer_time"]


def fit_connection_overhead(target: float = CHUNKED_TARGET_S, file_size: int = FILE_SIZE,
                            chunk_size: int = DEFAULT_CHUNK_SIZE) -> float:
    """Overhead (s) that makes a chunked read from the warm cache take ``target`` seconds.

    Transfer time is affine in the overhead, so two runs pin it exactly.
    """
    t0 = access_time("chunked", 0.0, file_size, chunk_size)
    t1 = access_time("chunked", 1.0, file_size, chunk_size)
    if t1 <= t0:
        raise RuntimeError("transfer time does not grow with connection overhead")
    overhead = (target - t0) / (t1 - t0)
    if overhead < 0:
        raise ValueError(f"target {target}s is below the zero-overhead time {t0:.3f}s")
    return overhead


def access_table(overhead: Optional[float] = None, file_size: int = FILE_SIZE) -> dict:
    if overhead is None:
        overhead = fit_connection_overhead()
    return {m: access_time(m, overhead, file_size) for m in ("cached", "chunked", "remote")}


# -- ramp-up -----------------------------------------------------------------------

MEMORY_MODELS = {
    "process": {"per_connection": 128 * MiB, "mode": "crash"},
    "thread": {"per_connection": 64 * KiB, "mode": "refuse"},
}


def ramp_scenario(rate: float, memory_model: str = "process", file_size: int = 400 * MB,
                  transfer_time: float = 300.0, cap: int = 64 * GiB,
                  duration: Optional[float] = None, limit_per_principal: Optional[int] = None,
                  seed: int = 0) -> dict:
    """Jobs start at ``rate`` Hz against one origin; each transfer is held to
    ``file_size / transfer_time`` bytes/s by the worker's own network share."""
    if memory_model not in MEMORY_MODELS:
        raise ValueError(f"memory_model must be one of {sorted(MEMORY_MODELS)}")
    duration = duration if duration is not None else 2.0 * transfer_time
    n_jobs = max(1, math.ceil(rate * duration))
    mem = dict(MEMORY_MODELS[memory_model], cap=cap)
    return {
        "nodes": [
            {"node_id": "origin", "role": "origin", "geo": ORIGIN_GEO, "memory": mem,
             "limit_per_principal": limit_per_principal, "recovery_s": transfer_time},
            {"node_id": "pool", "role": "site", "geo": SITE_GEO,
             "per_job_bandwidth_Bps": file_size / transfer_time},
        ],
        "links": [
            # 100 Gbps front door; never the bottleneck here
            {"a": "pool", "b": "origin", "latency_s": WAN_LATENCY,
             "bandwidth_Bps": 12.5e9, "conn_overhead_s": 0.0},
        ],
        "workload": {"n_jobs": n_jobs, "startup_rate": rate, "file_size": file_size,
                     "mode": "direct", "source_policy": ["origin"], "retries": 3,
                     "backoff_s": 0.5},
        "seed": seed,
    }


@dataclass
class RampPoint:
    rate: float
    memory_model: str
    transfer_time: float
    expected_connections: float
    steady_connections: float
    peak_connections: int
    peak_memory: int
    memory_cap: int
    crash_events: int
    refusals: int
    failed_jobs: int

    @property
    def failed(self) -> bool:
        return bool(self.crash_events or self.refusals or self.failed_jobs)

    def to_json(self) -> dict:
        return dict(asdict(self), failed=self.failed)


def ramp_experiment(rate_sweep: Sequence[float], memory_model: str = "process",
                    file_size: int = 400 * MB, transfer_time: float = 300.0,
                    cap: int = 64 * GiB, seed: int = 0) -> list[RampPoint]:
    """For each start rate, compare origin concurrency with ``rate * transfer_time``
    and report peak memory and any crash or refusal."""
    out = []
    for rate in rate_sweep:
        sc = parse(ramp_scenario(rate, memory_model, file_size, transfer_time, cap, seed=seed))
        runner = engine.Runner(sc)
        metrics = runner.run()
        origin = runner.sim.nodes["origin"]
        # steady window: after the first transfers finish, before arrivals stop
        last_start = (sc.workload.n_jobs - 1) / rate
        t0 = transfer_time + 2 * WAN_LATENCY
        steady = origin.steady_connections(t0, last_start) if last_start > t0 else float(
            origin.ledger.peak_total)
        node = metrics["nodes"]["origin"]
        out.append(RampPoint(
            rate=rate,
            memory_model=memory_model,
            transfer_time=transfer_time,
            expected_connections=rate * transfer_time,
            steady_connections=round(steady, 3),
            peak_connections=node["peak_connections"],
            peak_memory=node["peak_memory"],
            memory_cap=cap,
            crash_events=node["crash_events"],
            refusals=node["refusals"],
            failed_jobs=metrics["global"]["failed_jobs"],
        ))
    return out
