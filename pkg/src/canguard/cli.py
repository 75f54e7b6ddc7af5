"""Command-line entry point: synth, train, calibrate, detect and eval.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attackgen, detect, evaluation, ingest, model, pipeline
from .attackgen import AttackEvent, Scenario, ScenarioError
from .pipeline import ArtifactMismatch, ConfigError, RunConfig
from .preprocess import PreprocessError, span_of, window_truth
from .scenarios import desk_scenario

log = logging.getLogger("canguard")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ARTIFACT = 0, 2, 3, 4


class DataError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "format", None):
        cfg.format = args.format
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    return cfg


def _records(path: str | Path, fmt: str) -> list[ingest.SignalRecord]:
    if not Path(path).exists():
        raise DataError(f"data file {path} not found")
    bad: list[ingest.MalformedRow] = []
    recs = list(ingest.parse_log(path, fmt, malformed=bad))
    if bad:
        log.warning("%s: skipped %d malformed rows", path, len(bad))
    return recs


def _thresholds(path: str | Path) -> detect.ThresholdSet:
    try:
        return detect.ThresholdSet.load(path)
    except FileNotFoundError as exc:
        raise ArtifactMismatch(f"thresholds file {path} not found") from exc
    except (KeyError, ValueError) as exc:
        raise ArtifactMismatch(f"thresholds file {path} is unreadable: {exc}") from exc


def _load_models(args, cfg):
    try:
        return pipeline.load_models(args.models_dir, cfg)
    except FileNotFoundError as exc:
        raise ArtifactMismatch(str(exc)) from exc


# --------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.config:
        try:
            sc = Scenario.load(args.config)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {args.config}: {exc}") from exc
        if args.seed is not None:
            sc.seed = args.seed
    else:
        sc = desk_scenario(0 if args.seed is None else args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = sc.traffic.m
    ingest.write_canonical(attackgen.build_train_trace(sc).records, out / "train.csv", m)
    events = {}
    for kind in sc.kinds():
        trace, evs = attackgen.build_test_trace(sc, kind)
        ingest.write_canonical(trace.records, out / f"{kind}.csv", m)
        events[kind] = [{"start_step": e.start_step, "end_step": e.end_step, "kind": e.kind} for e in evs]
    (out / "events.json").write_text(json.dumps(events, indent=1, sort_keys=True) + "\n")
    print(f"wrote train.csv and {len(events)} attack files to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    recs = _records(args.data, cfg.format)
    if not recs:
        raise DataError(f"{args.data}: no records")
    d = Path(args.models_dir)
    if (d / "order.json").exists() and not args.overwrite:
        # resuming into an existing directory: the stored layout must agree
        stored = pipeline.Preprocessor.load(d)
        m = cfg.m if cfg.m is not None else pipeline.infer_m(recs)
        if stored.m != m:
            raise ArtifactMismatch(f"{d} holds artifacts for m={stored.m}, data has m={m}")
    prep, models = pipeline.train_models(cfg, recs, epochs=args.epochs)
    pipeline.save_models(d, cfg, prep, models)
    print(f"trained {len(models)} models (m={prep.m}, w={cfg.w}, periods={cfg.periods}) into {d}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    prep, models = _load_models(args, cfg)
    recs = _records(args.data, cfg.format)
    th = pipeline.calibrate_models(cfg, prep, models, recs)
    th.save(args.thresholds)
    print(f"R_signal={th.r_signal:.6g} written to {args.thresholds}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _config(args)
    prep, models = _load_models(args, cfg)
    th = _thresholds(args.thresholds)
    if not Path(args.data).exists():
        raise DataError(f"data file {args.data} not found")
    det = pipeline.StreamingDetector(cfg, prep, models, th, batch=args.batch, stride=cfg.eval_stride)
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w", newline="")
    n_alarm = n = 0
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["origin_step", "time"] + [f"P_{k + 1}" for k in range(len(models))] + ["P_ens", "attack"])
        for t, v in det.run(ingest.parse_log(args.data, cfg.format)):
            w.writerow([v.origin_step, repr(t)] + [repr(p) for p in v.per_ae_scores] + [repr(v.ensemble_score), int(v.attack)])
            out.flush()
            n += 1
            n_alarm += v.attack
    finally:
        if out is not sys.stdout:
            out.close()
    log.info("%d verdicts, %d alarms", n, n_alarm)
    return EXIT_OK


def _read_verdicts(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["origin_step", "time"] or header[-2:] != ["P_ens", "attack"]:
            raise DataError(f"{path}: not a verdicts file")
        rows = list(reader)
    origins = np.array([int(r[0]) for r in rows], dtype=np.int64)
    per = np.array([[float(x) for x in r[2:-2]] for r in rows], dtype=np.float64).reshape(len(rows), len(header) - 4)
    ens = np.array([float(r[-2]) for r in rows], dtype=np.float64)
    attack = np.array([r[-1] == "1" for r in rows], dtype=bool)
    return origins, per, ens, attack


def _events_for(name: str, events_path: str | None, labels: np.ndarray, gap: int) -> list[AttackEvent]:
    if events_path:
        obj = json.loads(Path(events_path).read_text())
        return [AttackEvent(int(e["start_step"]), int(e["end_step"]), e["kind"]) for e in obj.get(name, [])]
    # no event list: merge labelled runs closer than one queue length
    merged: list[list[int]] = []
    for a, b in attackgen.label_runs(labels):
        if merged and a - merged[-1][1] <= gap:
            merged[-1][1] = b
        else:
            merged.append([a, b])
    return [AttackEvent(a, b, name) for a, b in merged]


def cmd_eval(args) -> int:
    cfg = _config(args)
    if len(args.verdicts) != len(args.data):
        raise ConfigError("--verdicts and --data must list the same number of files")
    budgets = args.fpr_budget or cfg.fpr_budgets
    span = span_of(cfg.periods, cfg.w)
    results = []
    for vpath, dpath in zip(args.verdicts, args.data):
        recs = _records(dpath, cfg.format)
        origins, per, ens, attack = _read_verdicts(vpath)
        if per.shape[1] != len(cfg.periods):
            raise ArtifactMismatch(f"{vpath}: {per.shape[1]} model columns, config has {len(cfg.periods)} periods")
        if origins.size and origins[-1] >= len(recs):
            raise DataError(f"{vpath} refers to step {origins[-1]} beyond {dpath}")
        labels = np.array([r.label for r in recs], dtype=np.int8)
        name = Path(dpath).stem
        results.append(
            evaluation.AttackResult(
                name,
                origins,
                per,
                ens,
                window_truth(labels, origins, span),
                np.array([r.time for r in recs]),
                _events_for(name, args.events, labels, cfg.q),
                span,
                attack,
            )
        )
    summary = evaluation.report(results, cfg.periods, args.out, budgets)
    for name, a in summary["auc"].items():
        print(f"{name}: ensemble AUC {a['ensemble']:.4f}")
    for name, rate in summary["benign_fpr"].items():
        print(f"{name}: no attack windows, positive rate {rate:.4g}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canguard", description="Signal-level CAN intrusion detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--format", choices=ingest.FORMATS, help="input log format")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", required=True, help="input log")

    s = sub.add_parser("synth", help="generate a synthetic train file and labelled attack files")
    s.add_argument("--config", help="scenario JSON (default: built-in desk scenario)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fit ordering, scaling and one autoencoder per period")
    common(s)
    s.add_argument("--models-dir", required=True)
    s.add_argument("--epochs", type=int, help="override the configured epoch count (0 keeps initial weights)")
    s.add_argument("--overwrite", action="store_true", help="replace artifacts without checking their layout")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", help="compute the three threshold tiers from normal traffic")
    common(s)
    s.add_argument("--models-dir", required=True)
    s.add_argument("--thresholds", required=True, help="output thresholds JSON")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("detect", help="stream a log through the detector and write verdicts CSV")
    common(s)
    s.add_argument("--models-dir", required=True)
    s.add_argument("--thresholds", required=True)
    s.add_argument("--out", help="verdicts CSV (default: stdout)")
    s.add_argument("--batch", type=int, default=256, help="views scored per model call")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="ROC/AUC and latency report from verdict files")
    common(s, data=False)
    s.add_argument("--verdicts", nargs="+", required=True)
    s.add_argument("--data", nargs="+", required=True, help="labelled logs, one per verdicts file")
    s.add_argument("--events", help="events JSON written by synth")
    s.add_argument("--fpr-budget", type=float, action="append", help="repeatable; default from config")
    s.add_argument("--out", required=True, help="report directory")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactMismatch, model.ArtifactMismatch, evaluation.MissingArtifacts) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (DataError, ingest.IngestError, PreprocessError, detect.DetectError, evaluation.EvalError, model.ModelError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
