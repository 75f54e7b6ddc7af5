"""ROC/AUC, operating thresholds at FPR budgets, event latency and reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attackgen import AttackEvent


class EvalError(Exception):
    pass


class SingleClass(EvalError):
    pass


class Unattainable(EvalError):
    pass


class MissingArtifacts(EvalError):
    pass


@dataclass(frozen=True)
class ScoredWindow:
    origin_step: int
    p_ens: float
    truth: bool


@dataclass
class Roc:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _arrays(windows) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(windows, tuple):
        s, y = windows
        return np.asarray(s, dtype=np.float64), np.asarray(y, dtype=bool)
    s = np.array([w.p_ens for w in windows], dtype=np.float64)
    y = np.array([w.truth for w in windows], dtype=bool)
    return s, y


def roc(windows: Sequence[ScoredWindow] | tuple[np.ndarray, np.ndarray]) -> Roc:
    """ROC over every distinct score; the trapezoid AUC counts ties as half.

    A window is flagged at threshold ``c`` when its score is ``>= c``; the
    first point (threshold +inf) is (0, 0).
    """
    s, y = _arrays(windows)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise SingleClass(f"need both classes, got {pos} positive / {neg} negative")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / pos]
    fpr = np.r_[0.0, fp / neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return Roc(np.r_[np.inf, s[last]], fpr, tpr, auc)


def threshold_at_fpr(windows, budget: float) -> float:
    """Smallest threshold ``c`` whose benign rate of ``score > c`` is within budget.

    Candidates are the observed scores. The result is the most sensitive
    operating point that still respects the budget.
    """
    if not 0 < budget <= 1:
        raise ValueError("budget must lie in (0, 1]")
    s, y = _arrays(windows)
    benign = np.sort(s[~y])
    if benign.size == 0:
        raise Unattainable("no benign windows to bound the false-positive rate")
    for c in np.unique(s):
        above = benign.size - np.searchsorted(benign, c, side="right")
        if above / benign.size <= budget:
            return float(c)
    raise Unattainable(f"no threshold keeps the false-positive rate within {budget}")


@dataclass
class Latency:
    event: AttackEvent
    detected_step: int | None
    steps: int | None
    seconds: float | None

    @property
    def missed(self) -> bool:
        return self.detected_step is None


def event_latency(
    origins: np.ndarray,
    scores: np.ndarray,
    events: Sequence[AttackEvent],
    threshold: float,
    times: np.ndarray,
    span: int,
) -> list[Latency]:
    """Delay from each event's first attack step to the first alarm covering it.

    A window ending at ``o`` covers steps ``(o - span, o]``; it counts for an
    event when that range meets ``[start, end]`` and ``score > threshold``.
    """
    origins = np.asarray(origins)
    alarm = np.asarray(scores) > threshold
    out = []
    for ev in events:
        hit = alarm & (origins >= ev.start_step) & (origins - span < ev.end_step + 1)
        idx = np.flatnonzero(hit)
        if idx.size == 0:
            out.append(Latency(ev, None, None, None))
            continue
        o = int(origins[idx[0]])
        out.append(Latency(ev, o, o - ev.start_step, float(times[o] - times[ev.start_step])))
    return out


# ---------------------------------------------------------------- report


@dataclass
class AttackResult:
    """Everything the report needs about one attack file."""

    name: str
    origins: np.ndarray
    per_model: np.ndarray
    ensemble: np.ndarray
    truth: np.ndarray
    times: np.ndarray
    events: list[AttackEvent]
    span: int
    attack: np.ndarray | None = None


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def report(
    results: Sequence[AttackResult],
    periods: Sequence[int],
    out_dir: str | Path,
    budgets: Sequence[float] = (0.001, 0.005, 0.01),
) -> dict:
    """Write auc.csv, roc_<attack>.csv, latency.csv and report.svg.

    Returns the numbers that were written, keyed by attack name.
    """
    if results is None:
        raise MissingArtifacts("no scored attack files given")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"ae_T{t}" for t in periods]
    summary: dict = {"auc": {}, "latency": {}, "benign_fpr": {}}

    auc_rows, lat_rows, curves = [], [], {}
    for res in results:
        pos = bool(res.truth.any())
        neg = bool((~res.truth).any())
        if not (pos and neg):
            # without recorded verdicts, count windows with any flagged signal
            flagged = res.attack if res.attack is not None else res.ensemble > 0
            rate = float(np.mean(flagged)) if res.ensemble.size else 0.0
            summary["benign_fpr"][res.name] = rate
            continue
        per_auc = [roc((res.per_model[:, k], res.truth)).auc for k in range(len(periods))]
        ens = roc((res.ensemble, res.truth))
        summary["auc"][res.name] = {"per_model": per_auc, "ensemble": ens.auc}
        auc_rows.append([res.name] + [_fmt(a) for a in per_auc] + [_fmt(ens.auc)])
        curves[res.name] = (ens, [roc((res.per_model[:, k], res.truth)) for k in range(len(periods))])
        (out / f"roc_{res.name}.csv").write_text(
            _csv(
                [[_fmt(float(c)), _fmt(float(f)), _fmt(float(t))] for c, f, t in zip(ens.thresholds, ens.fpr, ens.tpr)],
                ["threshold", "fpr", "tpr"],
            )
        )
        summary["latency"][res.name] = {}
        for b in budgets:
            thr = threshold_at_fpr((res.ensemble, res.truth), b)
            lats = event_latency(res.origins, res.ensemble, res.events, thr, res.times, res.span)
            hit = [x for x in lats if not x.missed]
            mean_s = float(np.mean([x.seconds for x in hit])) if hit else None
            mean_steps = float(np.mean([x.steps for x in hit])) if hit else None
            missed = sum(x.missed for x in lats)
            summary["latency"][res.name][b] = {
                "threshold": thr,
                "mean_latency_s": mean_s,
                "mean_latency_steps": mean_steps,
                "missed": missed,
                "events": len(lats),
            }
            lat_rows.append([res.name, _fmt(b), _fmt(mean_s), _fmt(mean_steps), missed, len(lats)])

    (out / "auc.csv").write_text(_csv(auc_rows, ["attack"] + names + ["ensemble"]))
    (out / "latency.csv").write_text(
        _csv(lat_rows, ["attack", "fpr_budget", "mean_latency_s", "mean_latency_steps", "missed", "events"])
    )
    if summary["benign_fpr"]:
        (out / "benign.csv").write_text(
            _csv([[k, _fmt(v)] for k, v in summary["benign_fpr"].items()], ["file", "positive_rate"])
        )
    _plot(curves, names, out / "report.svg")
    return summary


def _plot(curves: dict, names: list[str], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "canguard"
    n = max(1, len(curves))
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, (name, (ens, per)) in zip(axes[0], curves.items()):
        for label, c in zip(names, per):
            ax.plot(c.fpr, c.tpr, lw=1, alpha=0.7, label=f"{label} {c.auc:.3f}")
        ax.plot(ens.fpr, ens.tpr, lw=2, color="k", label=f"ensemble {ens.auc:.3f}")
        ax.plot([0, 1], [0, 1], ls=":", color="grey", lw=0.8)
        ax.set_title(name)
        ax.set_xlabel("FPR")
        ax.set_ylabel("TPR")
        ax.legend(fontsize=6, loc="lower right")
    if not curves:
        axes[0][0].text(0.5, 0.5, "no attacks scored", ha="center")
        axes[0][0].set_axis_off()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
