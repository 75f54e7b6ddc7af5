import math

import numpy as np
import pytest

from canguard import attackgen
from canguard.attackgen import (
    AttackSpec,
    CyclicCorrelation,
    IdSpec,
    IntervalOutOfRange,
    PlaybackSourceOverlap,
    Scenario,
    ScenarioError,
    TrafficSpec,
)
from canguard.ingest import ATTACK
from canguard.preprocess import DataQueue, FILL_VALUE
from canguard.scenarios import desk_scenario


def _traffic(ids, gens, n, seed=0):
    return TrafficSpec(ids, gens, n, seed)


def _sine(**kw):
    return {"kind": "sine", "freq": 0.05, "amp": 0.4, **kw}


def test_single_sine_id():
    tr = attackgen.synth_normal(_traffic([IdSpec("a", 1, [0])], {0: _sine()}, 100))
    assert len(tr.records) == 100
    for k, r in enumerate(tr.records):
        assert r.values[0][1] == pytest.approx(0.5 + 0.4 * math.sin(2 * math.pi * 0.05 * k))


def test_two_ids_counting():
    spec = _traffic([IdSpec("a", 2, [0]), IdSpec("b", 3, [1])], {0: _sine(), 1: _sine()}, 12)
    recs = attackgen.synth_normal(spec).records
    expect = [(t, mid) for t in range(12) for mid, p in (("a", 2), ("b", 3)) if t % p == 0]
    assert len(recs) == 6 + 4
    assert [(round(r.time / 0.01), r.msg_id) for r in recs] == expect


def test_identity_coupling_duplicates_source():
    gens = {0: {"kind": "random_walk", "step": 0.02}, 1: {"kind": "correlated", "source": 0}}
    series = attackgen.signal_series(_traffic([IdSpec("a", 1, [0, 1])], gens, 300))
    np.testing.assert_array_equal(series[0], series[1])


def test_values_clamped_and_deterministic():
    gens = {0: {"kind": "sine", "freq": 0.01, "amp": 2.0, "noise": 0.1}}
    spec = _traffic([IdSpec("a", 1, [0])], gens, 500, seed=3)
    a, b = attackgen.signal_series(spec), attackgen.signal_series(spec)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_cyclic_correlation():
    gens = {0: {"kind": "correlated", "source": 1}, 1: {"kind": "correlated", "source": 0}}
    with pytest.raises(CyclicCorrelation):
        attackgen.synth_normal(_traffic([IdSpec("a", 1, [0, 1])], gens, 10))


def test_unknown_attack_kind():
    with pytest.raises(ScenarioError):
        AttackSpec("spoof", "a", 0, 10)


def _base(period=10, n=200):
    spec = _traffic([IdSpec("t", period, [0]), IdSpec("o", 1, [1])], {0: _sine(), 1: _sine(phase=1.0)}, n)
    return spec, attackgen.synth_normal(spec)


def _ticks(trace, msg_id, a=None, b=None):
    out = [round(trace.tick(r)) for r in trace.records if r.msg_id == msg_id]
    return [t for t in out if (a is None or t >= a) and (b is None or t < b)]


def test_flooding_every_step():
    spec, tr = _base(10)
    out = attackgen.inject(tr, AttackSpec("flooding", "t", 50, 100, {"multiplier": 10}), spec)
    assert _ticks(out, "t", 50, 150) == list(range(50, 150))
    injected = [r for r in out.records if r.label == ATTACK]
    assert all(r.msg_id == "t" for r in injected)
    assert len(injected) == 90


def test_flooding_rate_counts_and_payloads():
    spec, tr = _base(10, 400)
    a, b, k = 100, 300, 5
    out = attackgen.inject(tr, AttackSpec("flooding", "t", a, b - a, {"multiplier": k}), spec)
    nominal = len(_ticks(tr, "t", a, b))
    assert len(_ticks(out, "t", a, b)) == k * nominal
    onset = [r for r in tr.records if r.msg_id == "t" and round(tr.tick(r)) < a][-1]
    assert {r.values for r in out.records if r.label == ATTACK} == {onset.values}
    # legitimate frames survive untouched
    assert [r for r in out.records if r.label != ATTACK] == tr.records


def test_flooding_multiplier_one_is_noop():
    spec, tr = _base(10)
    out = attackgen.inject(tr, AttackSpec("flooding", "t", 50, 100, {"multiplier": 1}), spec)
    assert out.records == tr.records


def test_flooding_latest_payload():
    spec, tr = _base(10, 300)
    out = attackgen.inject(tr, AttackSpec("flooding", "t", 100, 100, {"multiplier": 2, "payload": "latest"}), spec)
    last = None
    for r in out.records:
        if r.msg_id != "t":
            continue
        if r.label == ATTACK:
            assert r.values == last.values
        else:
            last = r


def test_suppress_counts():
    spec, tr = _base(5, 200)
    out = attackgen.inject(tr, AttackSpec("suppress", "t", 50, 50), spec)
    assert len(tr.records) - len(out.records) == 10
    assert _ticks(out, "t", 50, 100) == []


def test_suppress_zero_length():
    spec, tr = _base(5)
    assert attackgen.inject(tr, AttackSpec("suppress", "t", 50, 0), spec).records == tr.records


def test_suppress_freezes_target_row():
    spec, tr = _base(5, 200)
    out = attackgen.inject(tr, AttackSpec("suppress", "t", 50, 50), spec)
    q = DataQueue(2, 1)
    frozen = []
    for r in out.records:
        q.push(r.values, r.label)
        if 50 <= round(out.tick(r)) < 100:
            frozen.append(q.grid[0, 0])
    assert len(set(frozen)) == 1 and frozen[0] != FILL_VALUE


def test_suppress_labels_start_at_first_missing_frame():
    spec, tr = _base(5, 200)
    out = attackgen.inject(tr, AttackSpec("suppress", "t", 52, 50), spec)
    lab = [round(out.tick(r)) for r in out.records if r.label == ATTACK]
    assert min(lab) == 55 and max(lab) == 101


def test_interval_out_of_range():
    spec, tr = _base()
    with pytest.raises(IntervalOutOfRange):
        attackgen.inject(tr, AttackSpec("suppress", "t", 150, 100), spec)


@pytest.mark.parametrize("kind", ["plateau", "continuous", "playback"])
def test_masquerade_keeps_timing(kind):
    spec, tr = _base(2, 400)
    params = {"source_start": 0} if kind == "playback" else {"drift": 0.001}
    out = attackgen.inject(tr, AttackSpec(kind, "t", 200, 100, params), spec)
    assert [(r.time, r.msg_id) for r in out.records] == [(r.time, r.msg_id) for r in tr.records]
    changed = [n for n, (x, y) in enumerate(zip(tr.records, out.records)) if x.label != y.label]
    assert all(out.records[n].msg_id == "t" for n in changed)
    assert len(changed) == 50


def test_plateau_is_constant_segment():
    spec, tr = _base(1, 300)
    out = attackgen.inject(tr, AttackSpec("plateau", "t", 100, 50), spec)
    vals = [r.values[0][1] for r in out.records if r.msg_id == "t"]
    assert len(set(vals[100:150])) == 1
    assert vals[100] == tr.records[[r.msg_id for r in tr.records].index("t", 200)].values[0][1]
    assert len(set(vals[150:160])) > 1


def test_continuous_zero_drift_equals_plateau():
    spec, tr = _base(2, 300)
    a = attackgen.inject(tr, AttackSpec("continuous", "t", 100, 60, {"drift": 0.0}), spec)
    b = attackgen.inject(tr, AttackSpec("plateau", "t", 100, 60), spec)
    assert a.records == b.records


def test_continuous_drift_and_clamp():
    spec, tr = _base(1, 300)
    out = attackgen.inject(tr, AttackSpec("continuous", "t", 100, 100, {"drift": 0.05}), spec)
    vals = [r.values[0][1] for r in out.records if r.msg_id == "t"][100:200]
    assert vals[1] - vals[0] == pytest.approx(0.05)
    assert vals[-1] == 1.0


def test_playback_copies_source_window():
    spec, tr = _base(2, 400)
    out = attackgen.inject(tr, AttackSpec("playback", "t", 200, 100, {"source_start": 50}), spec)
    src = [r.values for r in tr.records if r.msg_id == "t" and 50 <= round(tr.tick(r)) < 150]
    got = [r.values for r in out.records if r.msg_id == "t" and 200 <= round(out.tick(r)) < 300]
    assert got == src


def test_playback_overlap_rejected():
    spec, tr = _base(2, 400)
    with pytest.raises(PlaybackSourceOverlap):
        attackgen.inject(tr, AttackSpec("playback", "t", 200, 100, {"source_start": 150}), spec)


def test_masquerade_signal_subset():
    spec = _traffic([IdSpec("t", 1, [0, 1])], {0: _sine(), 1: _sine(phase=2.0)}, 200)
    tr = attackgen.synth_normal(spec)
    out = attackgen.inject(tr, AttackSpec("plateau", "t", 50, 50, {"signals": [1], "value": 0.9}), spec)
    for x, y in zip(tr.records[50:100], out.records[50:100]):
        assert y.values[0] == x.values[0] and y.values[1] == (1, 0.9)


def test_label_runs_and_events():
    assert attackgen.label_runs([0, 1, 1, 0, 0, 1]) == [(1, 2), (5, 5)]
    assert attackgen.label_runs([0, 0]) == []
    spec, tr = _base(2, 400)
    specs = [AttackSpec("plateau", "t", 40, 20), AttackSpec("plateau", "t", 200, 20)]
    for s in specs:
        tr = attackgen.inject(tr, s, spec)
    events = attackgen.events_of(tr, specs)
    labelled = np.flatnonzero([r.label for r in tr.records])
    half = labelled[labelled < 200]
    assert [(e.start_step, e.end_step) for e in events] == [
        (half[0], half[-1]),
        (labelled[len(half)], labelled[-1]),
    ]


def test_labels_are_sound_on_desk_scenario():
    sc = desk_scenario(0, train_steps=2000, test_steps=30_000)
    for kind in attackgen.ATTACK_KINDS:
        trace, events = attackgen.build_test_trace(sc, kind)
        assert len(events) == 5
        specs = [a for a in sc.attacks if a.kind == kind]
        inside = np.zeros(len(trace.records), bool)
        ticks = np.array([trace.tick(r) for r in trace.records])
        for s in specs:
            inside |= (ticks >= s.start_step) & (ticks < s.start_step + s.duration_steps)
        labels = np.array([r.label for r in trace.records], bool)
        assert not (labels & ~inside).any()


def test_scenario_json_round_trip_is_deterministic(tmp_path):
    import json

    sc = desk_scenario(1, train_steps=500, test_steps=30_000)
    obj = {
        "traffic": sc.traffic.to_json(),
        "attacks": [a.__dict__ for a in sc.attacks],
        "train_steps": sc.train_steps,
        "test_steps": sc.test_steps,
        "seed": sc.seed,
    }
    path = tmp_path / "s.json"
    path.write_text(json.dumps(obj))
    back = Scenario.load(path)
    assert attackgen.build_train_trace(back).records == attackgen.build_train_trace(sc).records
    a, _ = attackgen.build_test_trace(back, "plateau")
    b, _ = attackgen.build_test_trace(sc, "plateau")
    assert a.records == b.records
