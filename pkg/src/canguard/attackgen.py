"""Synthetic multi-rate CAN traffic and the five labelled attack kinds.

Time is counted in integer *ticks* (``Trace.tick_s`` seconds each). Every
message ID emits on its own tick period; within one tick messages appear in
declaration order. Attack intervals are ``[start_step, start_step +
duration_steps)`` in ticks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import ATTACK, NORMAL, SignalRecord, natural_key

ATTACK_KINDS = ("flooding", "suppress", "plateau", "continuous", "playback")
MASQUERADE_KINDS = ("plateau", "continuous", "playback")


class ScenarioError(ValueError):
    pass


class CyclicCorrelation(ScenarioError):
    pass


class IntervalOutOfRange(ScenarioError):
    pass


class PlaybackSourceOverlap(ScenarioError):
    pass


@dataclass
class IdSpec:
    msg_id: str
    period_steps: int
    signals: list[int]
    offset: int = 0


@dataclass
class TrafficSpec:
    ids: list[IdSpec]
    generators: dict[int, dict]
    duration_steps: int
    seed: int = 0
    tick_s: float = 0.01

    @property
    def m(self) -> int:
        return sum(len(i.signals) for i in self.ids)

    def period_of(self, msg_id: str) -> int:
        for i in self.ids:
            if i.msg_id == msg_id:
                return i.period_steps
        raise ScenarioError(f"unknown message id {msg_id!r}")

    def signals_of(self, msg_id: str) -> list[int]:
        for i in self.ids:
            if i.msg_id == msg_id:
                return list(i.signals)
        raise ScenarioError(f"unknown message id {msg_id!r}")

    @classmethod
    def from_json(cls, obj: dict) -> "TrafficSpec":
        ids = [
            IdSpec(d["msg_id"], int(d["period_steps"]), [int(s) for s in d["signals"]], int(d.get("offset", 0)))
            for d in obj["ids"]
        ]
        gens = {int(k): dict(v) for k, v in obj["generators"].items()}
        return cls(ids, gens, int(obj["duration_steps"]), int(obj.get("seed", 0)), float(obj.get("tick_s", 0.01)))

    def to_json(self) -> dict:
        return {
            "ids": [i.__dict__ for i in self.ids],
            "generators": {str(k): v for k, v in sorted(self.generators.items())},
            "duration_steps": self.duration_steps,
            "seed": self.seed,
            "tick_s": self.tick_s,
        }


@dataclass
class AttackSpec:
    kind: str
    target_id: str
    start_step: int
    duration_steps: int
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ScenarioError(f"unknown attack kind {self.kind!r}")

    @classmethod
    def from_json(cls, obj: dict) -> "AttackSpec":
        return cls(
            obj["kind"],
            obj["target_id"],
            int(obj["start_step"]),
            int(obj["duration_steps"]),
            dict(obj.get("params", {})),
        )


@dataclass
class Trace:
    records: list[SignalRecord]
    tick_s: float
    duration_steps: int

    def tick(self, rec: SignalRecord) -> float:
        return rec.time / self.tick_s


# ------------------------------------------------------------ generation


def _topo_order(gens: dict[int, dict]) -> list[int]:
    order, state = [], {}

    def visit(i: int, path: tuple[int, ...]) -> None:
        if state.get(i) == 2:
            return
        if state.get(i) == 1:
            raise CyclicCorrelation(f"correlation cycle through signals {path + (i,)}")
        state[i] = 1
        g = gens[i]
        if g["kind"] == "correlated":
            src = int(g["source"])
            if src not in gens:
                raise ScenarioError(f"signal {i} correlates with unknown signal {src}")
            visit(src, path + (i,))
        state[i] = 2
        order.append(i)

    for i in sorted(gens):
        visit(i, ())
    return order


def signal_series(spec: TrafficSpec) -> np.ndarray:
    """Latent per-tick value of every signal, shape (m, duration_steps)."""
    n = spec.duration_steps
    rng = np.random.default_rng(spec.seed)
    t = np.arange(n, dtype=np.float64)
    out = np.zeros((spec.m, n))
    for i in _topo_order(spec.generators):
        g = spec.generators[i]
        kind = g["kind"]
        if kind == "sine":
            v = g.get("offset", 0.5) + g.get("amp", 0.4) * np.sin(
                2 * math.pi * g["freq"] * t + g.get("phase", 0.0)
            )
        elif kind == "random_walk":
            # reflected walk keeps the level inside [0, 1] without sticking to the rails
            steps = rng.normal(0.0, g["step"], n)
            v = np.empty(n)
            x = g.get("start", 0.5)
            for k in range(n):
                x += steps[k]
                if x < 0:
                    x = -x
                elif x > 1:
                    x = 2 - x
                v[k] = x
        elif kind == "correlated":
            src = out[int(g["source"])]
            lag = int(g.get("lag", 0))
            if lag:
                src = np.concatenate([np.full(lag, src[0]), src[:-lag]])
            v = g.get("offset", 0.0) + g.get("gain", 1.0) * src
        else:
            raise ScenarioError(f"unknown generator kind {kind!r}")
        noise = g.get("noise", 0.0)
        if noise:
            v = v + rng.normal(0.0, noise, n)
        out[i] = np.clip(v, 0.0, 1.0)
    return out


def synth_normal(spec: TrafficSpec) -> Trace:
    if any(i.period_steps < 1 for i in spec.ids):
        raise ScenarioError("message periods must be >= 1")
    want = sorted(s for i in spec.ids for s in i.signals)
    if want != list(range(spec.m)) or sorted(spec.generators) != want:
        raise ScenarioError("signals must be 0..m-1, each with one generator")
    series = signal_series(spec)
    records = []
    for tick in range(spec.duration_steps):
        for ids in spec.ids:
            if (tick - ids.offset) % ids.period_steps == 0 and tick >= ids.offset:
                vals = tuple((s, float(series[s, tick])) for s in ids.signals)
                records.append(SignalRecord(tick * spec.tick_s, ids.msg_id, vals, NORMAL))
    return Trace(records, spec.tick_s, spec.duration_steps)


# ------------------------------------------------------------- injection


def _interval(trace: Trace, spec: AttackSpec) -> tuple[int, int]:
    a, b = spec.start_step, spec.start_step + spec.duration_steps
    if spec.duration_steps < 0 or a < 0 or b > trace.duration_steps:
        raise IntervalOutOfRange(
            f"{spec.kind} interval [{a}, {b}) outside trace [0, {trace.duration_steps})"
        )
    return a, b


def _in(trace: Trace, rec: SignalRecord, a: int, b: int) -> bool:
    k = trace.tick(rec)
    return a - 1e-9 <= k < b - 1e-9


def _target_present(trace: Trace, spec: AttackSpec) -> None:
    if not any(r.msg_id == spec.target_id for r in trace.records):
        raise ScenarioError(f"target {spec.target_id!r} never appears in the trace")


def inject_flooding(trace: Trace, spec: AttackSpec, period_steps: int) -> Trace:
    """Raise the target's message rate to ``multiplier`` x nominal.

    Legitimate frames stay; the extra frames sit evenly between them and all
    repeat the payload the target last sent before the attack began
    (``params["payload"] = "latest"`` repeats the most recent legitimate
    payload at each injection instead).
    """
    a, b = _interval(trace, spec)
    _target_present(trace, spec)
    k = int(spec.params.get("multiplier", 10))
    if k < 1:
        raise ScenarioError("flooding multiplier must be >= 1")
    latest = spec.params.get("payload", "onset") == "latest"
    legit = [r for r in trace.records if r.msg_id == spec.target_id]
    phase = trace.tick(legit[0]) % period_steps
    gap = period_steps / k
    # first slot of the legitimate grid at or before the window start
    base = a - ((a - phase) % period_steps)
    injected = []
    j = 0
    while True:
        t = base + j * gap
        if t >= b - 1e-9:
            break
        if j % k and t >= a - 1e-9:
            injected.append(t)
        j += 1
    out: list[SignalRecord] = []
    last = None
    onset = None
    pending = iter(injected)
    nxt = next(pending, None)
    for rec in trace.records:
        tk = trace.tick(rec)
        while nxt is not None and nxt < tk - 1e-9:
            src = last if latest else onset
            if src is not None:
                out.append(SignalRecord(nxt * trace.tick_s, spec.target_id, src.values, ATTACK))
            nxt = next(pending, None)
        out.append(rec)
        if rec.msg_id == spec.target_id:
            last = rec
            if tk < a - 1e-9 or onset is None:
                onset = rec
    while nxt is not None:
        src = last if latest else onset
        if src is not None:
            out.append(SignalRecord(nxt * trace.tick_s, spec.target_id, src.values, ATTACK))
        nxt = next(pending, None)
    return Trace(out, trace.tick_s, trace.duration_steps)


def inject_suppress(trace: Trace, spec: AttackSpec) -> Trace:
    """Drop the target's frames in the window and mark the window as attacked.

    The marked window starts at the first frame that went missing, so every
    remaining record from there to the end of the interval carries the label.
    """
    a, b = _interval(trace, spec)
    if spec.duration_steps == 0:
        return Trace(list(trace.records), trace.tick_s, trace.duration_steps)
    _target_present(trace, spec)
    first_missing = None
    out = []
    for rec in trace.records:
        inside = _in(trace, rec, a, b)
        if inside and rec.msg_id == spec.target_id:
            if first_missing is None:
                first_missing = trace.tick(rec)
            continue
        if inside and first_missing is not None:
            rec = replace(rec, label=ATTACK)
        out.append(rec)
    return Trace(out, trace.tick_s, trace.duration_steps)


def inject_masquerade(trace: Trace, spec: AttackSpec) -> Trace:
    """Rewrite the target's payloads in the window; timing is untouched.

    ``params["signals"]`` restricts which of the target's signals change
    (default: all of them).
    """
    if spec.kind not in MASQUERADE_KINDS:
        raise ScenarioError(f"{spec.kind} is not a masquerade attack")
    a, b = _interval(trace, spec)
    _target_present(trace, spec)
    recs = trace.records
    hits = [n for n, r in enumerate(recs) if r.msg_id == spec.target_id and _in(trace, r, a, b)]
    if not hits:
        return Trace(list(recs), trace.tick_s, trace.duration_steps)
    chosen = spec.params.get("signals")
    chosen = None if chosen is None else {int(s) for s in chosen}
    start_vals = dict(recs[hits[0]].values)
    t0 = trace.tick(recs[hits[0]])

    if spec.kind == "playback":
        src_a = int(spec.params["source_start"])
        src_b = src_a + spec.duration_steps
        if src_a < 0 or src_b > trace.duration_steps:
            raise IntervalOutOfRange(f"playback source [{src_a}, {src_b}) outside trace")
        if src_a < b and a < src_b:
            raise PlaybackSourceOverlap(
                f"playback source [{src_a}, {src_b}) overlaps attack window [{a}, {b})"
            )
        source = [r for r in recs if r.msg_id == spec.target_id and _in(trace, r, src_a, src_b)]
        if not source:
            raise ScenarioError("playback source window holds no target frames")

    out = list(recs)
    for k, n in enumerate(hits):
        rec = recs[n]
        if spec.kind == "plateau":
            level = spec.params.get("value")
            fake = {i: (start_vals[i] if level is None else float(level)) for i, _ in rec.values}
        elif spec.kind == "continuous":
            drift = float(spec.params.get("drift", 0.0))
            elapsed = trace.tick(rec) - t0
            fake = {i: min(1.0, max(0.0, start_vals[i] + drift * elapsed)) for i, _ in rec.values}
        else:
            fake = dict(source[k % len(source)].values)
        vals = tuple((i, fake[i] if chosen is None or i in chosen else v) for i, v in rec.values)
        out[n] = SignalRecord(rec.time, rec.msg_id, vals, ATTACK)
    return Trace(out, trace.tick_s, trace.duration_steps)


def inject(trace: Trace, spec: AttackSpec, traffic: TrafficSpec) -> Trace:
    if spec.kind == "flooding":
        return inject_flooding(trace, spec, traffic.period_of(spec.target_id))
    if spec.kind == "suppress":
        return inject_suppress(trace, spec)
    return inject_masquerade(trace, spec)


# ---------------------------------------------------------------- events


@dataclass(frozen=True)
class AttackEvent:
    start_step: int
    end_step: int
    kind: str


def label_runs(labels: Sequence[int] | np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of attack-labelled record indices as inclusive pairs."""
    lab = np.asarray(labels, dtype=bool)
    if not lab.any():
        return []
    d = np.diff(np.concatenate([[0], lab.astype(np.int8), [0]]))
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def events_of(trace: Trace, specs: Sequence[AttackSpec]) -> list[AttackEvent]:
    """Map each attack interval onto the message-step indices of ``trace``."""
    events = []
    ticks = np.array([trace.tick(r) for r in trace.records])
    labels = np.array([r.label for r in trace.records])
    for spec in sorted(specs, key=lambda s: s.start_step):
        a, b = spec.start_step, spec.start_step + spec.duration_steps
        inside = np.flatnonzero((ticks >= a - 1e-9) & (ticks < b - 1e-9) & (labels == ATTACK))
        if inside.size:
            events.append(AttackEvent(int(inside[0]), int(inside[-1]), spec.kind))
    return events


# ------------------------------------------------------------- scenarios


@dataclass
class Scenario:
    traffic: TrafficSpec
    attacks: list[AttackSpec]
    train_steps: int
    test_steps: int
    seed: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> "Scenario":
        try:
            traffic = TrafficSpec.from_json(obj["traffic"])
            attacks = [AttackSpec.from_json(a) for a in obj.get("attacks", [])]
            return cls(
                traffic,
                attacks,
                int(obj.get("train_steps", traffic.duration_steps)),
                int(obj.get("test_steps", traffic.duration_steps)),
                int(obj.get("seed", traffic.seed)),
            )
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed scenario: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_json(json.loads(Path(path).read_text()))

    def kinds(self) -> list[str]:
        present = {a.kind for a in self.attacks}
        return [k for k in ATTACK_KINDS if k in present]


def build_test_trace(scenario: Scenario, kind: str) -> tuple[Trace, list[AttackEvent]]:
    """Clean trace for one attack kind (own seed) with all its attacks applied."""
    idx = ATTACK_KINDS.index(kind)
    spec = replace(scenario.traffic, duration_steps=scenario.test_steps, seed=scenario.seed * 100 + 11 + idx)
    trace = synth_normal(spec)
    specs = sorted((a for a in scenario.attacks if a.kind == kind), key=lambda s: s.start_step)
    for a in specs:
        trace = inject(trace, a, spec)
    return trace, events_of(trace, specs)


def build_train_trace(scenario: Scenario, *, salt: int = 0) -> Trace:
    spec = replace(scenario.traffic, duration_steps=scenario.train_steps, seed=scenario.seed * 100 + 1 + salt)
    return synth_normal(spec)


def msg_ids(trace: Trace) -> list[str]:
    return sorted({r.msg_id for r in trace.records}, key=natural_key)
