"""Turning a record stream into fixed-shape multi-period views.

Rows of every matrix here are *queue rows*: signal ``order.permutation[r]``
lives in row ``r``. Columns run backwards in time, column 0 being the most
recent message step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.cluster.hierarchy import leaves_list, linkage
from scipy.spatial.distance import squareform

from .ingest import SignalRecord

FILL_VALUE = 0.5


class PreprocessError(Exception):
    pass


class DegenerateInput(PreprocessError):
    pass


class BudgetTooSmall(PreprocessError):
    pass


class UnseenSignal(PreprocessError):
    pass


class QueueTooShallow(PreprocessError):
    pass


# ---------------------------------------------------------------- ordering


@dataclass
class SignalOrder:
    permutation: list[int]
    linkage_tree: list[list[float]] = field(default_factory=list)

    @property
    def inverse(self) -> list[int]:
        inv = [0] * len(self.permutation)
        for r, s in enumerate(self.permutation):
            inv[s] = r
        return inv

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        return np.asarray(matrix)[self.permutation]

    def restore(self, matrix: np.ndarray) -> np.ndarray:
        return np.asarray(matrix)[self.inverse]

    def to_json(self) -> dict:
        return {"permutation": self.permutation, "linkage": self.linkage_tree}

    @classmethod
    def from_json(cls, obj: dict) -> "SignalOrder":
        return cls([int(i) for i in obj["permutation"]], obj.get("linkage", []))


def abs_correlation(matrix: np.ndarray) -> np.ndarray:
    """|Pearson| between rows; constant rows correlate 0 with everything else."""
    x = np.asarray(matrix, dtype=np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    norm = np.sqrt((x * x).sum(axis=1))
    live = norm > 0
    c = np.zeros((x.shape[0], x.shape[0]))
    if live.any():
        xn = x[live] / norm[live, None]
        c[np.ix_(live, live)] = np.clip(xn @ xn.T, -1.0, 1.0)
    np.fill_diagonal(c, 1.0)
    return c


def fit_order(training_matrix: np.ndarray) -> SignalOrder:
    """Order rows so that strongly (anti-)correlated signals sit together.

    Average-linkage agglomerative clustering on ``1 - |corr|``; the row
    order is the dendrogram's leaf order.
    """
    x = np.asarray(training_matrix, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DegenerateInput("need an m x N matrix with N >= 2")
    m = x.shape[0]
    if m == 1:
        return SignalOrder([0])
    c = abs_correlation(x)
    off = c[~np.eye(m, dtype=bool)]
    if np.all(off == 0):
        return SignalOrder(list(range(m)))
    dist = 1.0 - c
    np.fill_diagonal(dist, 0.0)
    z = linkage(squareform(dist, checks=False), method="average")
    return SignalOrder([int(i) for i in leaves_list(z)], z.tolist())


def select_signals(
    critical: Iterable[int],
    corr_matrix: np.ndarray,
    budget: int,
    *,
    per_critical: int | None = None,
) -> list[int]:
    """Grow a critical signal set up to ``budget`` by correlation.

    Default rule: rank every other signal by its largest |corr| to any
    critical signal and take the best, lower index first on ties. With
    ``per_critical=k`` each critical signal instead recruits its own ``k``
    best partners in turn (the "two per attacked signal" configuration).
    """
    corr = np.abs(np.asarray(corr_matrix, dtype=np.float64))
    total = corr.shape[0]
    crit = sorted(set(critical))
    if budget < len(crit):
        raise BudgetTooSmall(f"budget {budget} < {len(crit)} critical signals")
    if budget > total:
        raise BudgetTooSmall(f"budget {budget} exceeds {total} available signals")
    chosen = list(crit)
    taken = set(chosen)
    if per_critical is not None:
        for c in crit:
            ranked = sorted((i for i in range(total) if i not in taken), key=lambda i: (-corr[c, i], i))
            for i in ranked[:per_critical]:
                if len(chosen) < budget:
                    chosen.append(i)
                    taken.add(i)
    rest = [i for i in range(total) if i not in taken]
    score = {i: max((corr[c, i] for c in crit), default=0.0) for i in rest}
    rest.sort(key=lambda i: (-score[i], i))
    chosen.extend(rest[: budget - len(chosen)])
    return sorted(chosen)


# ----------------------------------------------------------------- scaling


@dataclass
class Scaler:
    lo: list[float]
    hi: list[float]

    @classmethod
    def fit(cls, training_matrix: np.ndarray) -> "Scaler":
        """Per-row min/max; NaN marks an unobserved cell."""
        x = np.asarray(training_matrix, dtype=np.float64)
        seen = ~np.isnan(x)
        missing = np.flatnonzero(~seen.any(axis=1))
        if missing.size:
            raise UnseenSignal(f"signals never observed: {missing.tolist()}")
        return cls(np.nanmin(x, axis=1).tolist(), np.nanmax(x, axis=1).tolist())

    @classmethod
    def from_ranges(cls, ranges: Sequence[tuple[float, float]]) -> "Scaler":
        return cls([float(a) for a, _ in ranges], [float(b) for _, b in ranges])

    @property
    def m(self) -> int:
        return len(self.lo)

    def transform_value(self, i: int, v: float) -> float:
        lo, hi = self.lo[i], self.hi[i]
        if hi <= lo:
            return FILL_VALUE
        return min(1.0, max(0.0, (v - lo) / (hi - lo)))

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        x = np.asarray(matrix, dtype=np.float64)
        lo = np.asarray(self.lo)[:, None]
        span = (np.asarray(self.hi) - np.asarray(self.lo))[:, None]
        safe = np.where(span > 0, span, 1.0)
        out = np.clip((x - lo) / safe, 0.0, 1.0)
        return np.where(span > 0, out, FILL_VALUE)

    def inverse_transform(self, matrix: np.ndarray) -> np.ndarray:
        y = np.asarray(matrix, dtype=np.float64)
        lo = np.asarray(self.lo)[:, None]
        span = (np.asarray(self.hi) - np.asarray(self.lo))[:, None]
        return lo + y * span

    def to_json(self) -> dict:
        return {"min": self.lo, "max": self.hi}

    @classmethod
    def from_json(cls, obj: dict) -> "Scaler":
        return cls([float(v) for v in obj["min"]], [float(v) for v in obj["max"]])


def fit_scaler(training_matrix: np.ndarray) -> Scaler:
    return Scaler.fit(training_matrix)


def observation_matrix(records: Sequence[SignalRecord], m: int) -> np.ndarray:
    """m x N matrix of raw values, NaN where a step does not report a signal."""
    x = np.full((m, len(records)), np.nan)
    for j, rec in enumerate(records):
        for i, v in rec.values:
            x[i, j] = v
    return x


# ------------------------------------------------------------- data queue


@dataclass
class View:
    period: int
    grid: np.ndarray
    origin_step: int
    labels: np.ndarray

    @property
    def width(self) -> int:
        return self.grid.shape[1]


class DataQueue:
    """Fixed-depth forward-filled history, stored as a ring buffer."""

    def __init__(self, m: int, q: int):
        if m < 1 or q < 1:
            raise ValueError("queue needs m >= 1 and q >= 1")
        self.m = m
        self.q = q
        self._buf = np.full((m, q), FILL_VALUE)
        self._lab = np.zeros(q, dtype=bool)
        self._head = 0
        self.initialized_mask = np.zeros(m, dtype=bool)
        self.steps = 0

    def push(self, values: Iterable[tuple[int, float]], label: bool = False) -> "DataQueue":
        """Append one message step; ``values`` are (row, scaled value) pairs."""
        prev = self._head
        self._head = (self._head + 1) % self.q
        col = self._buf[:, self._head]
        col[:] = self._buf[:, prev]
        for r, v in values:
            col[r] = v
            self.initialized_mask[r] = True
        self._lab[self._head] = bool(label)
        self.steps += 1
        return self

    def _cols(self, idx: np.ndarray) -> np.ndarray:
        return (self._head - idx) % self.q

    @property
    def grid(self) -> np.ndarray:
        return self._buf[:, self._cols(np.arange(self.q))]

    @property
    def labels(self) -> np.ndarray:
        lab = self._lab[self._cols(np.arange(self.q))].copy()
        lab[self.steps :] = False
        return lab

    @property
    def ready(self) -> bool:
        """True once every row was observed and the queue is full."""
        return self.steps >= self.q and bool(self.initialized_mask.all())

    def columns(self, idx: np.ndarray) -> np.ndarray:
        return self._buf[:, self._cols(np.asarray(idx))]


def queue_depth(periods: Sequence[int], w: int) -> int:
    return w * max(periods)


def _check_periods(periods: Sequence[int], w: int, q: int) -> None:
    if w < 1 or not periods or any(int(t) < 1 for t in periods):
        raise ValueError("periods must be positive and w >= 1")
    need = queue_depth(periods, w)
    if q < need:
        raise QueueTooShallow(f"queue depth {q} < w * max(T) = {need}")


def sample_views(queue: DataQueue, periods: Sequence[int], w: int) -> list[View]:
    _check_periods(periods, w, queue.q)
    lab = queue.labels
    views = []
    for t in periods:
        t = int(t)
        grid = queue.columns(np.arange(w) * t)
        vlab = lab[: w * t].reshape(w, t).any(axis=1)
        views.append(View(t, grid, queue.steps - 1, vlab))
    return views


# ---------------------------------------------------------- batch route


@dataclass(eq=False)
class Preprocessor:
    """Scaler plus row order: maps raw records onto scaled queue rows."""

    scaler: Scaler
    order: SignalOrder

    def __post_init__(self) -> None:
        if sorted(self.order.permutation) != list(range(self.scaler.m)):
            raise PreprocessError("signal order and scaler disagree on m")
        self._row_of = self.order.inverse

    @property
    def m(self) -> int:
        return self.scaler.m

    def encode(self, record: SignalRecord) -> list[tuple[int, float]]:
        rows = self._row_of
        return [(rows[i], self.scaler.transform_value(i, v)) for i, v in record.values]

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "order.json").write_text(json.dumps(self.order.to_json(), indent=1) + "\n")
        (d / "scaler.json").write_text(json.dumps(self.scaler.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "Preprocessor":
        d = Path(directory)
        order = SignalOrder.from_json(json.loads((d / "order.json").read_text()))
        scaler = Scaler.from_json(json.loads((d / "scaler.json").read_text()))
        return cls(scaler, order)


def forward_fill(
    records: Sequence[SignalRecord], prep: Preprocessor
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Whole-trace forward fill.

    Returns ``(filled, labels, ready_from)``: ``filled`` is m x N with column
    ``t`` the queue's column 0 after pushing record ``t``; ``labels`` is the
    per-step attack flag; ``ready_from[r]`` is the first step at which row
    ``r`` had been observed (N if never).
    """
    m, n = prep.m, len(records)
    obs = np.zeros((m, n), dtype=bool)
    vals = np.full((m, n), FILL_VALUE)
    labels = np.zeros(n, dtype=bool)
    for j, rec in enumerate(records):
        labels[j] = rec.label != 0
        for r, v in prep.encode(rec):
            obs[r, j] = True
            vals[r, j] = v
    src = np.where(obs, np.arange(n)[None, :], -1)
    np.maximum.accumulate(src, axis=1, out=src)
    filled = np.where(src >= 0, np.take_along_axis(vals, np.maximum(src, 0), axis=1), FILL_VALUE)
    first = np.where(obs.any(axis=1), obs.argmax(axis=1), n)
    return filled, labels, first


def warmup_end(ready_from: np.ndarray, q: int) -> int:
    """First step index at which a streaming queue would report ready."""
    return max(q - 1, int(ready_from.max()) if ready_from.size else 0)


def window_batch(
    filled: np.ndarray,
    labels: np.ndarray,
    ends: np.ndarray,
    period: int,
    w: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Views ending at each step in ``ends``: (B, m, w) grids and (B, w) labels."""
    ends = np.asarray(ends, dtype=np.int64)
    if ends.size and ends.min() < w * period - 1:
        raise QueueTooShallow("window reaches before the start of the trace")
    cols = ends[:, None] - np.arange(w)[None, :] * period
    grids = filled[:, cols].transpose(1, 0, 2)
    cover = ends[:, None] - np.arange(w * period)[None, :]
    vlab = labels[cover].reshape(len(ends), w, period).any(axis=2)
    return np.ascontiguousarray(grids), vlab


def window_truth(labels: np.ndarray, ends: np.ndarray, span: int) -> np.ndarray:
    """True where any of the ``span`` steps ending at each window is attacked."""
    c = np.concatenate([[0], np.cumsum(labels.astype(np.int64))])
    ends = np.asarray(ends, dtype=np.int64)
    return (c[ends + 1] - c[np.maximum(ends + 1 - span, 0)]) > 0


def span_of(periods: Sequence[int], w: int) -> int:
    return w * max(int(t) for t in periods)

