"""Turn a per-node event stream into labeled L x N_c training samples.

The chain is: request matrix (counts per time bucket) -> windowed matrix
(counts per updating interval) -> overlapping history slices, each labeled
with the contents that should be cached for the following interval.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from vitcat.trace import RequestEvent

SAMPLE_MAGIC = b"VCAT"
SAMPLE_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class RequestMatrix:
    values: np.ndarray  # T x N_c int64
    t0: int
    resolution: int

    @property
    def n_times(self) -> int:
        return self.values.shape[0]


@dataclass
class WindowedMatrix:
    values: np.ndarray  # N_W x N_c int64
    window_len: int
    t0: int = 0
    resolution: int = 1

    @property
    def n_windows(self) -> int:
        return self.values.shape[0]

    @property
    def n_contents(self) -> int:
        return self.values.shape[1]

    def window_of(self, timestamp: int) -> int:
        """Window index of a raw timestamp; may be >= n_windows for the dropped tail."""
        return (timestamp - self.t0) // self.resolution // self.window_len


@dataclass
class Sample:
    x: np.ndarray  # L x N_c request history
    y: np.ndarray  # N_c binary labels
    u: int  # index of the labeled window


@dataclass(frozen=True)
class LabelParams:
    k: int
    l_history: int
    eps: float = 1e-12

    def validate(self, n_contents: int | None = None) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if n_contents is not None and self.k > n_contents:
            raise ValueError(f"k={self.k} exceeds the number of contents {n_contents}")
        if self.l_history < 2:
            raise ValueError("l_history must be at least 2")


def build_request_matrix(
    events: Sequence[RequestEvent],
    resolution: int,
    n_contents: int | None = None,
    t_min: int | None = None,
    t_max: int | None = None,
) -> RequestMatrix:
    """Count requests per (time bucket, content).

    ``t_min``/``t_max`` default to the span of ``events``; pass the global
    trace span so that all nodes share one time axis.
    """
    if not events:
        raise ValueError("cannot build a request matrix from an empty event list")
    if resolution < 1:
        raise ValueError("resolution must be at least 1 second")
    stamps = np.fromiter((ev.timestamp for ev in events), dtype=np.int64, count=len(events))
    ids = np.fromiter((ev.content_id for ev in events), dtype=np.int64, count=len(events))
    lo = int(stamps.min()) if t_min is None else t_min
    hi = int(stamps.max()) if t_max is None else t_max
    if stamps.min() < lo or stamps.max() > hi:
        raise ValueError("events fall outside [t_min, t_max]")
    n_c = int(ids.max()) + 1 if n_contents is None else n_contents
    if ids.max() >= n_c:
        raise ValueError(f"content id {ids.max()} out of range for N_c={n_c}")
    n_t = -(-(hi - lo + 1) // resolution)
    values = np.zeros((n_t, n_c), dtype=np.int64)
    np.add.at(values, ((stamps - lo) // resolution, ids), 1)
    return RequestMatrix(values, lo, resolution)


def window_requests(m: RequestMatrix, w: int) -> WindowedMatrix:
    """Sum ``w`` consecutive buckets per window; the partial tail is dropped."""
    if w < 1:
        raise ValueError("window length must be at least 1")
    if w > m.n_times:
        raise ValueError(f"window length {w} exceeds the {m.n_times} time buckets")
    n_w = m.n_times // w
    n_c = m.values.shape[1]
    values = m.values[: n_w * w].reshape(n_w, w, n_c).sum(axis=1)
    return WindowedMatrix(values, w, m.t0, m.resolution)


def request_probability(row) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if np.any(row < 0):
        raise ValueError("request counts must be non-negative")
    total = row.sum()
    if total == 0:
        return np.zeros_like(row)
    return row / total


def _centered_times(n: int) -> np.ndarray:
    # odd integers symmetric about 0: reversal negates them exactly
    return 2.0 * np.arange(1, n + 1) - (n + 1)


def _skew_from_sums(total, s1, s2, s3):
    # central moments scaled by total**2 and total**3; with integer counts
    # every sum is exact, so reversing time (s1, s3 -> -s1, -s3) flips the
    # sign of the result bit for bit
    n2 = s2 * total - s1 * s1
    n3 = s3 * total * total - 3.0 * s1 * s2 * total + 2.0 * s1 * s1 * s1
    return n2, n3


def skewness(history) -> float:
    """Skewness of the time index distribution weighted by request counts.

    Demand concentrated late in the history (a rising pattern) gives a
    negative value; a flat or empty history gives 0.
    """
    w = np.asarray(history, dtype=np.float64)
    if w.ndim != 1 or w.size < 2:
        raise ValueError("history must be a 1-D sequence of length >= 2")
    total = w.sum()
    if total == 0:
        return 0.0
    t = _centered_times(w.size)
    n2, n3 = _skew_from_sums(total, (w * t).sum(), (w * t**2).sum(), (w * t**3).sum())
    if n2 <= 0:
        return 0.0
    return float(n3 / n2**1.5)


def skewness_columns(histories: np.ndarray) -> np.ndarray:
    """Vectorized :func:`skewness` over the columns of an L x N_c block."""
    w = np.asarray(histories, dtype=np.float64)
    t = _centered_times(w.shape[0])[:, None]
    total = w.sum(axis=0)
    n2, n3 = _skew_from_sums(total, (w * t).sum(axis=0), (w * t**2).sum(axis=0), (w * t**3).sum(axis=0))
    ok = (total > 0) & (n2 > 0)
    out = np.zeros(w.shape[1])
    out[ok] = n3[ok] / n2[ok] ** 1.5
    return out


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:k]


def label_topk(window_row, histories, params: LabelParams) -> np.ndarray:
    """Mark the K contents to cache for the labeled window.

    Contents whose history has negative skewness are eligible and ranked by
    request probability in ``window_row``; if fewer than K are eligible the
    rest are filled from the remaining contents in the same ranking.
    """
    probs = request_probability(window_row)
    n_c = probs.size
    params.validate(n_c)
    skews = skewness_columns(np.asarray(histories).reshape(-1, n_c))
    ranked = topk_indices(probs, n_c)
    eligible = skews[ranked] < 0
    chosen = np.concatenate([ranked[eligible], ranked[~eligible]])[: params.k]
    y = np.zeros(n_c, dtype=np.uint8)
    y[chosen] = 1
    return y


def segment(m: WindowedMatrix, params: LabelParams) -> list[Sample]:
    """Stride-1 sliding histories of length L, each labeled by the next window."""
    params.validate(m.n_contents)
    L = params.l_history
    if m.n_windows <= L:
        raise ValueError(
            f"trace too short: {m.n_windows} windows, need more than L={L}"
        )
    samples = []
    for u in range(L, m.n_windows):
        x = m.values[u - L : u]
        samples.append(Sample(x.astype(np.float64), label_topk(m.values[u], x, params), u))
    return samples


def chronological_split(
    samples: Sequence[Sample], train_frac: float = 0.8
) -> tuple[list[Sample], list[Sample]]:
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    if len(samples) < 2:
        raise ValueError("need at least two samples to split")
    n_train = math.ceil(train_frac * len(samples))
    n_train = min(n_train, len(samples) - 1)
    return list(samples[:n_train]), list(samples[n_train:])


def node_samples(
    events: Sequence[RequestEvent],
    params: LabelParams,
    resolution: int,
    window_len: int,
    n_contents: int,
    t_min: int | None = None,
    t_max: int | None = None,
) -> tuple[WindowedMatrix, list[Sample]]:
    """Full chain for one node: request matrix, windowing, segmentation."""
    m = build_request_matrix(events, resolution, n_contents, t_min, t_max)
    wm = window_requests(m, window_len)
    return wm, segment(wm, params)


def write_samples(samples: Sequence[Sample], k: int, path: str | Path) -> None:
    """Binary sample file: header then, per sample, f32 history and u8 labels."""
    if not samples:
        raise ValueError("no samples to write")
    L, n_c = samples[0].x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, len(samples), L, n_c, k))
        for s in samples:
            if s.x.shape != (L, n_c):
                raise ValueError("samples have inconsistent shapes")
            fh.write(np.ascontiguousarray(s.x, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.y, dtype=np.uint8).tobytes())


def read_samples(path: str | Path) -> tuple[list[Sample], int]:
    """Inverse of :func:`write_samples`; returns ``(samples, k)``.

    Window indices are not stored; stride-1 segmentation implies ``u = L + i``.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated sample file")
    magic, version, m, L, n_c, k = _HEADER.unpack_from(blob)
    if magic != SAMPLE_MAGIC:
        raise ValueError(f"{path}: not a sample file (magic {magic!r})")
    if version != SAMPLE_VERSION:
        raise ValueError(f"{path}: unsupported sample file version {version}")
    xsz, ysz = 4 * L * n_c, n_c
    if len(blob) != _HEADER.size + m * (xsz + ysz):
        raise ValueError(f"{path}: size does not match header")
    samples = []
    off = _HEADER.size
    for i in range(m):
        x = np.frombuffer(blob, dtype="<f4", count=L * n_c, offset=off).reshape(L, n_c)
        off += xsz
        y = np.frombuffer(blob, dtype=np.uint8, count=n_c, offset=off).copy()
        off += ysz
        samples.append(Sample(x.astype(np.float64), y, L + i))
    return samples, k
