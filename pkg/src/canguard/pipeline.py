"""Training and deployment workflows over persisted artifacts."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import detect, model
from .ingest import SignalRecord, build_catalog
from .preprocess import (
    DataQueue,
    Preprocessor,
    Scaler,
    SignalOrder,
    fit_order,
    forward_fill,
    queue_depth,
    sample_views,
    span_of,
    warmup_end,
    window_batch,
    window_truth,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ArtifactMismatch(Exception):
    pass


@dataclass
class RunConfig:
    m: int | None = None
    w: int = 50
    periods: list[int] = field(default_factory=lambda: [1, 5, 10])
    p: float = 95.0
    q_pct: float = 99.0
    r: float = 99.0
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    patience: int = 10
    seed: int = 0
    train_stride: int = 25
    calib_stride: int = 5
    eval_stride: int = 1
    val_fraction: float = 0.2
    fpr_budgets: list[float] = field(default_factory=lambda: [0.001, 0.005, 0.01])
    format: str = "canonical_csv"

    def __post_init__(self) -> None:
        self.periods = [int(t) for t in self.periods]
        if not self.periods or any(t < 1 for t in self.periods):
            raise ConfigError("periods must be positive integers")
        if sorted(set(self.periods)) != self.periods:
            raise ConfigError("periods must be strictly increasing")
        for name in ("p", "q_pct", "r"):
            if not 0 < getattr(self, name) < 100:
                raise ConfigError(f"{name} must lie in (0, 100)")
        if self.w < 4:
            raise ConfigError("w must be at least 4")
        if min(self.train_stride, self.calib_stride, self.eval_stride) < 1:
            raise ConfigError("strides must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    @property
    def q(self) -> int:
        return queue_depth(self.periods, self.w)

    def ae_config(self, m: int) -> model.AeConfig:
        return model.AeConfig(
            m=m,
            w=self.w,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            optimizer=self.optimizer,
            patience=self.patience,
            seed=self.seed,
        )

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- windows


@dataclass
class Windows:
    """Views of one trace at a common set of end steps."""

    ends: np.ndarray
    views: dict[int, np.ndarray]
    truth: np.ndarray
    times: np.ndarray


def window_ends(n: int, ready: int, stride: int) -> np.ndarray:
    return np.arange(ready, n, stride, dtype=np.int64)


def make_windows(
    records: Sequence[SignalRecord],
    prep: Preprocessor,
    periods: Sequence[int],
    w: int,
    stride: int,
    *,
    with_views: bool = True,
) -> Windows:
    filled, labels, first = forward_fill(records, prep)
    q = queue_depth(periods, w)
    ends = window_ends(len(records), warmup_end(first, q), stride)
    views = {}
    if with_views:
        for t in periods:
            views[t] = window_batch(filled, labels, ends, t, w)[0].astype(np.float32)
    truth = window_truth(labels, ends, span_of(periods, w))
    times = np.array([r.time for r in records])
    return Windows(ends, views, truth, times)


# --------------------------------------------------------------- training


def fit_preprocessor(records: Sequence[SignalRecord], m: int) -> Preprocessor:
    catalog = build_catalog(records, m)
    scaler = Scaler.from_ranges(catalog.value_range)
    flat = Preprocessor(scaler, SignalOrder(list(range(m))))
    filled, _, _ = forward_fill(records, flat)
    return Preprocessor(scaler, fit_order(filled))


def infer_m(records: Iterable[SignalRecord]) -> int:
    top = -1
    for r in records:
        for i, _ in r.values:
            top = max(top, i)
    return top + 1


def split_tail(records: Sequence[SignalRecord], fraction: float) -> tuple[list, list]:
    cut = len(records) - round(fraction * len(records))
    return list(records[:cut]), list(records[cut:])


def train_models(
    cfg: RunConfig,
    records: Sequence[SignalRecord],
    *,
    epochs: int | None = None,
) -> tuple[Preprocessor, list[model.AeModel]]:
    m = cfg.m if cfg.m is not None else infer_m(records)
    fit_part, val_part = split_tail(records, cfg.val_fraction)
    prep = fit_preprocessor(fit_part, m)
    train_w = make_windows(fit_part, prep, cfg.periods, cfg.w, cfg.train_stride)
    val_w = None
    if val_part and len(val_part) > cfg.q:
        val_w = make_windows(val_part, prep, cfg.periods, cfg.w, cfg.train_stride)
    ae = cfg.ae_config(m)
    models = []
    for t in cfg.periods:
        mdl = model.build(ae, t)
        log.info("training period %d on %d views", t, len(train_w.views[t]))
        model.train(mdl, train_w.views[t], None if val_w is None else val_w.views[t], epochs=epochs)
        models.append(mdl)
    return prep, models


def losses_for(models: Sequence[model.AeModel], views: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    out = {}
    for mdl in models:
        x = views[mdl.period]
        rec = model.reconstruct(mdl, x)
        out[mdl.period] = model.loss_matrix(x, rec)
    return out


def calibrate_models(
    cfg: RunConfig,
    prep: Preprocessor,
    models: Sequence[model.AeModel],
    records: Sequence[SignalRecord],
) -> detect.ThresholdSet:
    """Thresholds from the held-out tail of the normal training trace."""
    _, val_part = split_tail(records, cfg.val_fraction)
    part = val_part if cfg.val_fraction > 0 else list(records)
    wins = make_windows(part, prep, cfg.periods, cfg.w, cfg.calib_stride)
    if len(wins.ends) < detect.MIN_CALIBRATION:
        raise detect.InsufficientData(
            f"only {len(wins.ends)} calibration windows; need {detect.MIN_CALIBRATION}"
        )
    return detect.calibrate(losses_for(models, wins.views), cfg.p, cfg.q_pct, cfg.r)


@dataclass
class Scored:
    ends: np.ndarray
    per_model: np.ndarray
    ensemble: np.ndarray
    attack: np.ndarray
    truth: np.ndarray
    times: np.ndarray


def score_records(
    cfg: RunConfig,
    prep: Preprocessor,
    models: Sequence[model.AeModel],
    th: detect.ThresholdSet,
    records: Sequence[SignalRecord],
    stride: int | None = None,
    chunk: int = 4096,
) -> Scored:
    """Batch scoring of a whole trace; equal to streaming at the same steps."""
    stride = cfg.eval_stride if stride is None else stride
    filled, labels, first = forward_fill(records, prep)
    ends = window_ends(len(records), warmup_end(first, cfg.q), stride)
    per_parts, ens_parts = [], []
    for s in range(0, len(ends), chunk):
        e = ends[s : s + chunk]
        views = {t: window_batch(filled, labels, e, t, cfg.w)[0] for t in cfg.periods}
        per, ens, _ = detect.score_windows(losses_for(models, views), th)
        per_parts.append(per)
        ens_parts.append(ens)
    n = len(cfg.periods)
    per = np.concatenate(per_parts) if per_parts else np.zeros((0, n))
    ens = np.concatenate(ens_parts) if ens_parts else np.zeros(0)
    return Scored(
        ends,
        per,
        ens,
        ens > th.r_signal,
        window_truth(labels, ends, span_of(cfg.periods, cfg.w)),
        np.array([r.time for r in records]),
    )


# ------------------------------------------------------------- streaming


class StreamingDetector:
    """Record-at-a-time deployment path.

    Each record is pushed into the forward-filled queue; once the queue is
    warm, its views are buffered and scored in small batches, and verdicts
    come out in step order. ``flush`` drains the buffer.
    """

    def __init__(
        self,
        cfg: RunConfig,
        prep: Preprocessor,
        models: Sequence[model.AeModel],
        th: detect.ThresholdSet,
        batch: int = 256,
        stride: int = 1,
    ):
        check_artifacts(cfg, prep, models, th)
        self.cfg, self.prep, self.models, self.th = cfg, prep, list(models), th
        self.queue = DataQueue(prep.m, cfg.q)
        self.batch = batch
        self.stride = stride
        self._pending: list[tuple[int, float, list]] = []
        self._ready_at: int | None = None

    def push(self, record: SignalRecord) -> list[tuple[float, detect.Verdict]]:
        self.queue.push(self.prep.encode(record), record.label != 0)
        step = self.queue.steps - 1
        if not self.queue.ready:
            return []
        if self._ready_at is None:
            self._ready_at = step
        if (step - self._ready_at) % self.stride:
            return []
        views = sample_views(self.queue, self.cfg.periods, self.cfg.w)
        self._pending.append((step, record.time, [v.grid for v in views]))
        if len(self._pending) >= self.batch:
            return self.flush()
        return []

    def flush(self) -> list[tuple[float, detect.Verdict]]:
        if not self._pending:
            return []
        steps = [p[0] for p in self._pending]
        views = {
            t: np.stack([p[2][k] for p in self._pending]) for k, t in enumerate(self.cfg.periods)
        }
        out = detect.verdicts(losses_for(self.models, views), self.th, steps)
        times = [p[1] for p in self._pending]
        self._pending = []
        return list(zip(times, out))

    def run(self, records: Iterable[SignalRecord]) -> Iterator[tuple[float, detect.Verdict]]:
        for rec in records:
            yield from self.push(rec)
        yield from self.flush()


def check_artifacts(cfg: RunConfig, prep: Preprocessor, models: Sequence[model.AeModel], th: detect.ThresholdSet | None = None) -> None:
    m = prep.m
    if cfg.m is not None and cfg.m != m:
        raise ArtifactMismatch(f"config m={cfg.m} but preprocessing artifacts have m={m}")
    got = [mdl.period for mdl in models]
    if got != list(cfg.periods):
        raise ArtifactMismatch(f"config periods {cfg.periods} but models cover {got}")
    for mdl in models:
        if (mdl.config.m, mdl.config.w) != (m, cfg.w):
            raise ArtifactMismatch(
                f"model for period {mdl.period} is {mdl.config.m}x{mdl.config.w}, expected {m}x{cfg.w}"
            )
    if th is not None:
        if th.periods != list(cfg.periods) or (th.m and th.m != m) or (th.w and th.w != cfg.w):
            raise ArtifactMismatch(
                f"thresholds cover periods {th.periods} at {th.m}x{th.w}, expected {cfg.periods} at {m}x{cfg.w}"
            )


# ------------------------------------------------------------ persistence


def model_path(directory: str | Path, period: int) -> Path:
    return Path(directory) / f"ae_T{period}.bin"


def save_models(directory: str | Path, cfg: RunConfig, prep: Preprocessor, models: Sequence[model.AeModel]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    prep.save(d)
    for mdl in models:
        model.save(mdl, model_path(d, mdl.period))
    meta = {"m": prep.m, "w": cfg.w, "periods": list(cfg.periods), "ae": cfg.ae_config(prep.m).to_json()}
    (d / "run.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_models(directory: str | Path, cfg: RunConfig) -> tuple[Preprocessor, list[model.AeModel]]:
    d = Path(directory)
    missing = [p for p in [d / "order.json", d / "scaler.json"] + [model_path(d, t) for t in cfg.periods] if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing artifacts: {', '.join(str(p) for p in missing)}")
    prep = Preprocessor.load(d)
    ae = cfg.ae_config(prep.m)
    try:
        models = [model.load(model_path(d, t), ae) for t in cfg.periods]
    except model.ArtifactMismatch as exc:
        raise ArtifactMismatch(str(exc)) from exc
    for t, mdl in zip(cfg.periods, models):
        if mdl.period != t:
            raise ArtifactMismatch(f"{model_path(d, t)} holds period {mdl.period}")
    check_artifacts(cfg, prep, models)
    return prep, models
