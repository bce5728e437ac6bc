"""Cache-hit simulation for refresh-based and reactive caching policies.

Refresh policies (the learned predictor, PopCaching-style frequency ranking
and the clairvoyant oracle) rewrite the whole cache at every updating time
from the last L windows.  LRU and LFU react per request.  All policies are
scored on the same windows so their ratios are comparable.
"""
from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from vitcat.pipeline import WindowedMatrix, topk_indices
from vitcat.trace import RequestEvent

POLICIES = ("vitcat", "lru", "lfu", "popcaching", "clairvoyant")


def default_capacity(n_contents: int, fraction: float = 0.1) -> int:
    return max(1, math.ceil(fraction * n_contents))


@dataclass
class PolicyResult:
    """Hits and requests per updating time for one (policy, node)."""

    policy: str
    node_id: int
    windows: list[int] = field(default_factory=list)
    hits: list[int] = field(default_factory=list)
    requests: list[int] = field(default_factory=list)

    @property
    def total_hits(self) -> int:
        return int(sum(self.hits))

    @property
    def total_requests(self) -> int:
        return int(sum(self.requests))

    @property
    def hit_ratio(self) -> float:
        n = self.total_requests
        return self.total_hits / n if n else 0.0

    def restrict(self, start: int, stop: int | None = None) -> PolicyResult:
        keep = [i for i, u in enumerate(self.windows) if u >= start and (stop is None or u < stop)]
        return PolicyResult(
            self.policy,
            self.node_id,
            [self.windows[i] for i in keep],
            [self.hits[i] for i in keep],
            [self.requests[i] for i in keep],
        )


@dataclass
class SimReport:
    results: list[PolicyResult] = field(default_factory=list)

    def add(self, result: PolicyResult) -> None:
        self.results.append(result)

    def policies(self) -> list[str]:
        return list(dict.fromkeys(r.policy for r in self.results))

    def for_policy(self, policy: str) -> list[PolicyResult]:
        return [r for r in self.results if r.policy == policy]

    def hit_ratio(self, policy: str) -> float:
        """Network-wide ratio: hits and requests summed over nodes first."""
        rs = self.for_policy(policy)
        n = sum(r.total_requests for r in rs)
        return sum(r.total_hits for r in rs) / n if n else 0.0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "node_id", "updating_time", "hits", "requests", "cumulative_hit_ratio"])
            for r in self.results:
                ch = cr = 0
                for u, h, n in zip(r.windows, r.hits, r.requests):
                    ch += h
                    cr += n
                    w.writerow([r.policy, r.node_id, u, h, n, f"{(ch / cr if cr else 0.0):.10g}"])

    def write_summary(self, path: str | Path, include_optimal: bool = True) -> None:
        """One row per policy; the unattainable all-served line is ``optimal`` = 1."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "hits", "requests", "hit_ratio"])
            for p in self.policies():
                rs = self.for_policy(p)
                w.writerow([
                    p,
                    sum(r.total_hits for r in rs),
                    sum(r.total_requests for r in rs),
                    f"{self.hit_ratio(p):.10g}",
                ])
            if include_optimal:
                n = sum(r.total_requests for r in self.for_policy(self.policies()[0])) if self.results else 0
                w.writerow(["optimal", n, n, "1"])


Chooser = Callable[[np.ndarray], Iterable[int]]


def simulate_refresh_policy(
    windowed: WindowedMatrix,
    choose: Chooser,
    k: int,
    l_history: int,
    policy: str = "refresh",
    node_id: int = 0,
    start: int | None = None,
) -> PolicyResult:
    """Refresh the cache at every updating time ``u >= max(L, start)``.

    ``choose`` gets the previous L windows and returns the K cached ids; hits
    at ``u`` are the requests of window ``u`` for cached contents.
    """
    values = windowed.values
    n_w, n_c = values.shape
    if k > n_c:
        raise ValueError(f"capacity {k} exceeds the number of contents {n_c}")
    if n_w <= l_history:
        raise ValueError(f"need more than L={l_history} windows, have {n_w}")
    res = PolicyResult(policy, node_id)
    for u in range(max(l_history, start or 0), n_w):
        ids = np.unique(np.fromiter(choose(values[u - l_history : u]), dtype=np.int64))
        if ids.size > k:
            raise ValueError(f"policy {policy!r} cached {ids.size} contents, capacity is {k}")
        res.windows.append(u)
        res.hits.append(int(values[u, ids].sum()))
        res.requests.append(int(values[u].sum()))
    return res


def clairvoyant_topk(windowed: WindowedMatrix, u: int, k: int) -> np.ndarray:
    """The K most requested contents of window ``u`` itself."""
    if not 0 <= u < windowed.n_windows:
        raise ValueError(f"window {u} out of range")
    return topk_indices(windowed.values[u], k)


def simulate_clairvoyant(
    windowed: WindowedMatrix, k: int, l_history: int, node_id: int = 0, start: int | None = None
) -> PolicyResult:
    values = windowed.values
    res = PolicyResult("clairvoyant", node_id)
    for u in range(max(l_history, start or 0), windowed.n_windows):
        res.windows.append(u)
        res.hits.append(int(values[u, clairvoyant_topk(windowed, u, k)].sum()))
        res.requests.append(int(values[u].sum()))
    return res


def popcaching_predict(history, k: int) -> np.ndarray:
    """K contents with the highest request totals over the history."""
    h = np.asarray(history)
    if np.any(h < 0):
        raise ValueError("history must be non-negative")
    return topk_indices(h.sum(axis=0), k)


def vitcat_choose(model, history, k: int | None = None) -> np.ndarray:
    history = np.asarray(history)
    cfg = model.config
    if history.shape != (cfg.l_history, cfg.n_contents):
        raise ValueError(f"history shape {history.shape} does not match the model")
    return model.choose(history, k)


def _replay(
    policy: str,
    events: Sequence[RequestEvent],
    capacity: int,
    windowed: WindowedMatrix | None,
    node_id: int,
    evict_key,
) -> PolicyResult:
    if capacity < 1:
        raise ValueError("capacity must be at least 1")
    resident: OrderedDict[int, None] = OrderedDict()
    freq: dict[int, int] = {}
    last: dict[int, int] = {}
    per_window: dict[int, list[int]] = {}
    for clock, ev in enumerate(events):
        c = ev.content_id
        hit = c in resident
        if hit:
            resident.move_to_end(c)
            freq[c] += 1
        else:
            if len(resident) >= capacity:
                victim = min(resident, key=lambda x: evict_key(freq[x], last[x]))
                del resident[victim]
                del freq[victim]
            resident[c] = None
            freq[c] = 1
        last[c] = clock
        u = windowed.window_of(ev.timestamp) if windowed is not None else 0
        slot = per_window.setdefault(u, [0, 0])
        slot[0] += hit
        slot[1] += 1
    res = PolicyResult(policy, node_id)
    for u in sorted(per_window):
        if windowed is not None and u >= windowed.n_windows:
            continue
        res.windows.append(u)
        res.hits.append(per_window[u][0])
        res.requests.append(per_window[u][1])
    return res


def lru_replay(
    events: Sequence[RequestEvent],
    capacity: int,
    windowed: WindowedMatrix | None = None,
    node_id: int = 0,
) -> PolicyResult:
    """Per-request LRU.  With ``windowed`` hits are bucketed by updating time."""
    return _replay("lru", events, capacity, windowed, node_id, lambda f, t: t)


def lfu_replay(
    events: Sequence[RequestEvent],
    capacity: int,
    windowed: WindowedMatrix | None = None,
    node_id: int = 0,
) -> PolicyResult:
    """Per-request in-cache LFU; ties evict the least recently used.

    Counts start at 1 on insertion and are forgotten on eviction.
    """
    return _replay("lfu", events, capacity, windowed, node_id, lambda f, t: (f, t))
