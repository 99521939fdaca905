"""Max-min fair rate allocation (progressive filling)."""

from __future__ import annotations

from typing import Hashable, Mapping, Sequence

INF = float("inf")
_EPS = 1e-12


def max_min_rates(flows: Sequence[tuple[Sequence[Hashable], float]],
                  capacity: Mapping[Hashable, float]) -> list[float]:
    """Max-min fair rates for ``flows`` given as (links, demand) pairs.

    All unfrozen flows grow together; a flow freezes when it reaches its
    demand or when one of its links saturates.
    """
    n = len(flows)
    rates = [0.0] * n
    demand = [float(d) for _, d in flows]
    users: dict = {link: set() for link in capacity}
    for i, (links, d) in enumerate(flows):
        if d < 0:
            raise ValueError("demand must be >= 0")
        if not links and d == INF:
            raise ValueError(f"flow {i} has no links and unbounded demand")
        if d > 0:
            for link in links:
                users[link].add(i)
    remaining = {link: float(c) for link, c in capacity.items()}
    active = {i for i in range(n) if demand[i] > 0}

    while active:
        inc = INF
        for link, us in users.items():
            if us:
                inc = min(inc, remaining[link] / len(us))
        for i in active:
            inc = min(inc, demand[i] - rates[i])
        inc = max(inc, 0.0)
        for i in active:
            rates[i] += inc
        for link, us in users.items():
            if us:
                remaining[link] -= inc * len(us)
        done = {i for i in active if rates[i] >= demand[i] - _EPS * max(1.0, demand[i])}
        for link, us in users.items():
            if us and remaining[link] <= _EPS * max(1.0, capacity[link]):
                remaining[link] = 0.0
                done |= us
        active -= done
        for i in done:
            for link in flows[i][0]:
                users[link].discard(i)
    return rates


def bandwidth_share(capacity: float, demands: Sequence[float]) -> list[float]:
    """Per-flow rates of flows sharing one link (use ``INF`` for greedy flows)."""
    if not demands:
        raise ValueError("need at least one flow")
    return max_min_rates([(("link",), d) for d in demands], {"link": capacity})
