"""Request traces: CSV ingest, per-node partitioning and synthetic generation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from vitcat.seeding import rng_stream

DEFAULT_NODES = 6
FORMATS = ("generic_csv", "movielens_ratings")

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1
_MAX_TS = (1 << 63) - 1


class TraceFormatError(ValueError):
    """A trace file could not be parsed.  ``line`` is 1-based, or None."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, slots=True)
class RequestEvent:
    user_id: int
    content_id: int
    timestamp: int
    zip: str = "0"


@dataclass(frozen=True)
class TraceMeta:
    n_contents: int
    n_events: int
    t_min: int
    t_max: int
    n_nodes: int = DEFAULT_NODES


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a piecewise-stationary Zipf request trace.

    The horizon is cut into ``n_regimes`` equal slices; each slice draws a
    fresh random ranking of the contents and samples requests from a Zipf law
    over that ranking.  Users are spread over ``n_zips`` zip codes.
    """

    n_contents: int
    n_events: int
    zipf_alpha: float = 1.0
    n_regimes: int = 1
    horizon: int = 100_000
    seed: int = 0
    n_users: int = 600
    n_zips: int = 60

    def validate(self) -> None:
        if self.n_contents < 1 or self.n_events < 1:
            raise ValueError("synthetic trace needs at least one content and one event")
        if self.zipf_alpha <= 0:
            raise ValueError("zipf_alpha must be positive")
        if not 1 <= self.n_regimes <= self.n_events:
            raise ValueError("n_regimes must lie in [1, n_events]")
        if self.horizon < self.n_regimes:
            raise ValueError("horizon must give every regime at least one second")
        if self.n_users < 1 or self.n_zips < 1:
            raise ValueError("n_users and n_zips must be positive")


def fnv1a_64(data: bytes) -> int:
    h = _FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV64_PRIME) & _U64
    return h


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def _split(line: str) -> list[str]:
    if "::" in line:
        return [c.strip() for c in line.split("::")]
    return [c.strip() for c in next(csv.reader([line]))]


def _parse_rows(lines: Iterable[str], fmt: str) -> list[tuple[int, int, int, str]]:
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        cols = _split(line)
        if lineno == 1 and cols and not _is_int(cols[0]):
            continue  # header
        try:
            if fmt == "movielens_ratings":
                if len(cols) < 4:
                    raise ValueError("expected userId,movieId,rating,timestamp")
                user, content, ts = int(cols[0]), int(cols[1]), int(cols[3])
                float(cols[2])
                zip_code = "0"
            else:
                if len(cols) < 3:
                    raise ValueError("expected user_id,content_id,timestamp[,zip]")
                user, content, ts = int(cols[0]), int(cols[1]), int(cols[2])
                zip_code = cols[3] if len(cols) > 3 and cols[3] else "0"
        except ValueError as exc:
            raise TraceFormatError(f"malformed row {line!r} ({exc})", lineno) from None
        if user < 0 or content < 0 or not 0 <= ts <= _MAX_TS:
            raise TraceFormatError(f"negative or out-of-range field in {line!r}", lineno)
        rows.append((user, content, ts, zip_code))
    return rows


def _finalize(rows, n_nodes: int) -> tuple[list[RequestEvent], TraceMeta]:
    if not rows:
        raise TraceFormatError("trace is empty")
    raw_ids = np.array([r[1] for r in rows], dtype=np.int64)
    uniq, dense = np.unique(raw_ids, return_inverse=True)
    stamps = np.array([r[2] for r in rows], dtype=np.int64)
    order = np.argsort(stamps, kind="stable")
    events = [
        RequestEvent(rows[i][0], int(dense[i]), rows[i][2], rows[i][3]) for i in order
    ]
    meta = TraceMeta(
        n_contents=len(uniq),
        n_events=len(events),
        t_min=events[0].timestamp,
        t_max=events[-1].timestamp,
        n_nodes=n_nodes,
    )
    return events, meta


def parse_trace(
    path: str | Path, format: str = "generic_csv", n_nodes: int = DEFAULT_NODES
) -> tuple[list[RequestEvent], TraceMeta]:
    """Read a request trace, sort it by time and re-index contents densely.

    Content ids are mapped to ``0..N_c-1`` in ascending order of the raw id,
    so an already-dense trace keeps its ids.

    Raises:
        TraceFormatError: for unreadable files, malformed rows (with the
            1-based line number) and empty traces.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown trace format {format!r}; expected one of {FORMATS}")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise TraceFormatError(f"cannot read {path}: {exc}") from None
    return _finalize(_parse_rows(io.StringIO(text), format), n_nodes)


def write_trace(events: Sequence[RequestEvent], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("user_id,content_id,timestamp,zip\n")
        for ev in events:
            fh.write(f"{ev.user_id},{ev.content_id},{ev.timestamp},{ev.zip}\n")


def node_of(zip_code: str, n_nodes: int) -> int:
    return fnv1a_64(zip_code.encode("utf-8")) % n_nodes


def partition_by_node(
    events: Sequence[RequestEvent], n_nodes: int = DEFAULT_NODES
) -> list[list[RequestEvent]]:
    """Split events over caching nodes by FNV-1a hash of the zip code.

    Order within each partition follows the input order.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be at least 1")
    parts: list[list[RequestEvent]] = [[] for _ in range(n_nodes)]
    cache: dict[str, int] = {}
    for ev in events:
        node = cache.get(ev.zip)
        if node is None:
            node = cache[ev.zip] = node_of(ev.zip, n_nodes)
        parts[node].append(ev)
    return parts


def zipf_weights(n: int, alpha: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -alpha
    return w / w.sum()


def generate_synthetic(spec: SyntheticSpec) -> list[RequestEvent]:
    """Sample a time-ordered trace with regime-wise Zipf popularity."""
    spec.validate()
    rng = rng_stream(spec.seed, "trace")
    probs = zipf_weights(spec.n_contents, spec.zipf_alpha)
    user_zip = rng.integers(10000, 100000, size=spec.n_zips)[
        rng.integers(0, spec.n_zips, size=spec.n_users)
    ]

    per_regime = np.full(spec.n_regimes, spec.n_events // spec.n_regimes)
    per_regime[: spec.n_events % spec.n_regimes] += 1
    edges = np.linspace(0, spec.horizon, spec.n_regimes + 1).astype(np.int64)

    contents, stamps = [], []
    for r in range(spec.n_regimes):
        ranking = rng.permutation(spec.n_contents)
        ranks = rng.choice(spec.n_contents, size=per_regime[r], p=probs)
        contents.append(ranking[ranks])
        stamps.append(rng.integers(edges[r], edges[r + 1], size=per_regime[r]))
    content = np.concatenate(contents)
    ts = np.concatenate(stamps)
    users = rng.integers(0, spec.n_users, size=spec.n_events)

    order = np.argsort(ts, kind="stable")
    return [
        RequestEvent(int(users[i]), int(content[i]), int(ts[i]), str(user_zip[users[i]]))
        for i in order
    ]


def trace_meta(events: Sequence[RequestEvent], n_nodes: int = DEFAULT_NODES) -> TraceMeta:
    if not events:
        raise ValueError("empty event list")
    return TraceMeta(
        n_contents=max(ev.content_id for ev in events) + 1,
        n_events=len(events),
        t_min=min(ev.timestamp for ev in events),
        t_max=max(ev.timestamp for ev in events),
        n_nodes=n_nodes,
    )
