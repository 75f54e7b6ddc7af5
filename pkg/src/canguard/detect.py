"""Three-tier percentile thresholds and the ensemble attack decision.

For each autoencoder a loss matrix ``L`` (m x w) is reduced as

    B[i, j] = L[i, j] > R_loss[i]
    V[i]    = sum_j B[i, j]
    S[i]    = V[i] > R_time[i]
    P       = sum_i S[i] / m

and the per-model scores are averaged into ``P_ens``; a window is an attack
when ``P_ens > R_signal``. Percentiles interpolate linearly between order
statistics (numpy's default ``linear`` method).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MIN_CALIBRATION = 100


class DetectError(Exception):
    pass


class InsufficientData(DetectError):
    pass


class EmptyScores(DetectError):
    pass


class ShapeMismatch(DetectError):
    pass


def percentile(values, pct: float, axis=None) -> np.ndarray | float:
    if not 0 <= pct <= 100:
        raise ValueError(f"percentile {pct} outside [0, 100]")
    return np.percentile(np.asarray(values, dtype=np.float64), pct, axis=axis, method="linear")


def calibrate_loss_thresholds(losses: np.ndarray, p: float) -> np.ndarray:
    """Per-signal p-th percentile of every training loss in that signal's row."""
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < MIN_CALIBRATION:
        raise InsufficientData(f"need >= {MIN_CALIBRATION} loss matrices, got {x.shape[0] if x.ndim == 3 else 0}")
    if not 0 < p < 100:
        raise ValueError("p must lie in (0, 100)")
    m = x.shape[1]
    return percentile(x.transpose(1, 0, 2).reshape(m, -1), p, axis=1)


def violations(losses: np.ndarray, r_loss: np.ndarray) -> np.ndarray:
    """V for a batch: count of columns above the row threshold, shape (N, m)."""
    x = np.asarray(losses, dtype=np.float64)
    r = np.asarray(r_loss, dtype=np.float64)
    if x.shape[-2] != r.shape[0]:
        raise ShapeMismatch(f"{x.shape[-2]} signals vs {r.shape[0]} thresholds")
    return (x > r[:, None]).sum(axis=-1)


def calibrate_time_thresholds(v: np.ndarray, q_pct: float) -> np.ndarray:
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < MIN_CALIBRATION:
        raise InsufficientData(f"need >= {MIN_CALIBRATION} violation vectors")
    return percentile(x, q_pct, axis=0)


def score_step1(loss: np.ndarray, r_loss: np.ndarray, r_time: np.ndarray):
    """Single-window reduction ``L -> (B, V, S, P_x)``."""
    L = np.asarray(loss, dtype=np.float64)
    r_loss = np.asarray(r_loss, dtype=np.float64)
    r_time = np.asarray(r_time, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != r_loss.shape[0] or r_time.shape != r_loss.shape:
        raise ShapeMismatch(f"loss {L.shape} vs thresholds {r_loss.shape}/{r_time.shape}")
    B = (L > r_loss[:, None]).astype(np.int64)
    V = B.sum(axis=1)
    S = (V > r_time).astype(np.int64)
    return B, V, S, int(S.sum()) / L.shape[0]


def score_batch(losses: np.ndarray, r_loss: np.ndarray, r_time: np.ndarray):
    """Vectorised step 1 over (N, m, w): returns S (N, m) and P (N,)."""
    V = violations(losses, r_loss)
    S = V > np.asarray(r_time, dtype=np.float64)
    m = S.shape[1]
    return S, S.sum(axis=1) / m


def ensemble(scores: Sequence[float]) -> float:
    if len(scores) == 0:
        raise EmptyScores("ensemble of zero scores")
    total = 0.0
    for s in scores:
        total += s
    return total / len(scores)


def ensemble_batch(per_model: np.ndarray) -> np.ndarray:
    """Row-wise mean of (N, n) scores, summed left to right like ``ensemble``."""
    x = np.asarray(per_model, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise EmptyScores("ensemble of zero scores")
    total = np.zeros(x.shape[0])
    for k in range(x.shape[1]):
        total = total + x[:, k]
    return total / x.shape[1]


def calibrate_ensemble_threshold(p_ens: Sequence[float], r: float) -> float:
    x = np.asarray(p_ens, dtype=np.float64)
    if x.size < MIN_CALIBRATION:
        raise InsufficientData(f"need >= {MIN_CALIBRATION} ensemble scores, got {x.size}")
    return float(percentile(x, r))


def decide(p_ens: float, r_signal: float) -> bool:
    return p_ens > r_signal


# ------------------------------------------------------------ thresholds


@dataclass
class ThresholdSet:
    periods: list[int]
    r_loss: dict[int, np.ndarray]
    r_time: dict[int, np.ndarray]
    r_signal: float
    p: float = 95.0
    q_pct: float = 99.0
    r: float = 99.0
    m: int = 0
    w: int = 0

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "w": self.w,
            "periods": list(self.periods),
            "percentiles": {"p": self.p, "q_pct": self.q_pct, "r": self.r},
            "R_loss": {str(t): [float(v) for v in self.r_loss[t]] for t in self.periods},
            "R_time": {str(t): [float(v) for v in self.r_time[t]] for t in self.periods},
            "R_signal": float(self.r_signal),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ThresholdSet":
        periods = [int(t) for t in obj["periods"]]
        pct = obj["percentiles"]
        return cls(
            periods,
            {t: np.asarray(obj["R_loss"][str(t)], dtype=np.float64) for t in periods},
            {t: np.asarray(obj["R_time"][str(t)], dtype=np.float64) for t in periods},
            float(obj["R_signal"]),
            float(pct["p"]),
            float(pct["q_pct"]),
            float(pct["r"]),
            int(obj.get("m", 0)),
            int(obj.get("w", 0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ThresholdSet":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class Verdict:
    per_ae_scores: list[float]
    ensemble_score: float
    signal_flags: np.ndarray
    attack: bool
    origin_step: int = -1


def calibrate(
    losses: dict[int, np.ndarray],
    p: float = 95.0,
    q_pct: float = 99.0,
    r: float = 99.0,
) -> ThresholdSet:
    """Fit all three tiers on normal-traffic loss matrices, keyed by period.

    Order matters: R_loss on the pooled losses, then V with the final
    R_loss, then R_time, then the ensemble scores, then R_signal.
    """
    periods = list(losses)
    if not periods:
        raise EmptyScores("no models to calibrate")
    r_loss, r_time, scores = {}, {}, []
    n = None
    for t in periods:
        L = np.asarray(losses[t])
        if n is None:
            n = L.shape[0]
        elif L.shape[0] != n:
            raise ShapeMismatch("every period needs the same number of calibration windows")
        r_loss[t] = calibrate_loss_thresholds(L, p)
        V = violations(L, r_loss[t])
        r_time[t] = calibrate_time_thresholds(V, q_pct)
        scores.append((V > r_time[t]).sum(axis=1) / L.shape[1])
    p_ens = ensemble_batch(np.stack(scores, axis=1))
    m, w = np.asarray(losses[periods[0]]).shape[1:]
    return ThresholdSet(periods, r_loss, r_time, calibrate_ensemble_threshold(p_ens, r), p, q_pct, r, int(m), int(w))


def score_windows(losses: dict[int, np.ndarray], th: ThresholdSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-model scores (N, n), ensemble scores (N,), OR-ed signal flags (N, m)."""
    per, flags = [], None
    for t in th.periods:
        S, P = score_batch(losses[t], th.r_loss[t], th.r_time[t])
        per.append(P)
        flags = S if flags is None else flags | S
    per = np.stack(per, axis=1)
    return per, ensemble_batch(per), flags


def verdicts(losses: dict[int, np.ndarray], th: ThresholdSet, origins: Sequence[int]) -> list[Verdict]:
    per, ens, flags = score_windows(losses, th)
    return [
        Verdict(per[k].tolist(), float(ens[k]), flags[k], decide(ens[k], th.r_signal), int(origins[k]))
        for k in range(len(ens))
    ]

