"""Ready-made synthetic scenarios."""

from __future__ import annotations

from .attackgen import AttackSpec, IdSpec, Scenario, TrafficSpec


def desk_traffic(seed: int = 0) -> TrafficSpec:
    """Twelve signals on six IDs with periods 1..10 ticks.

    Every signal has at least one strongly (anti-)correlated partner carried
    by a different ID, so overwriting one breaks a relationship the others
    still follow.
    """
    ids = [
        IdSpec("id1", 1, [0, 1]),
        IdSpec("id2", 2, [2, 3]),
        IdSpec("id3", 3, [4, 5], offset=1),
        IdSpec("id4", 5, [6, 7], offset=2),
        IdSpec("id5", 7, [8, 9], offset=3),
        IdSpec("id6", 10, [10, 11], offset=4),
    ]
    gens = {
        0: {"kind": "sine", "freq": 1 / 400, "amp": 0.4, "noise": 0.005},
        1: {"kind": "correlated", "source": 0, "gain": -0.8, "offset": 0.9, "noise": 0.005},
        2: {"kind": "random_walk", "step": 0.01},
        3: {"kind": "correlated", "source": 2, "gain": 0.9, "offset": 0.05, "noise": 0.005},
        4: {"kind": "correlated", "source": 0, "lag": 5, "noise": 0.005},
        5: {"kind": "sine", "freq": 1 / 250, "amp": 0.35, "phase": 1.0, "noise": 0.005},
        6: {"kind": "correlated", "source": 5, "gain": 0.8, "offset": 0.1, "noise": 0.005},
        7: {"kind": "correlated", "source": 2, "noise": 0.01},
        8: {"kind": "random_walk", "step": 0.015},
        9: {"kind": "correlated", "source": 8, "gain": -1.0, "offset": 1.0, "noise": 0.005},
        10: {"kind": "correlated", "source": 5, "lag": 10, "noise": 0.005},
        11: {"kind": "correlated", "source": 8, "gain": 0.7, "offset": 0.15, "noise": 0.005},
    }
    return TrafficSpec(ids, gens, duration_steps=10_000, seed=seed, tick_s=0.01)


def _events(kind: str, starts: list[int], duration: int, make) -> list[AttackSpec]:
    out = []
    for k, start in enumerate(starts):
        target, params = make(k)
        out.append(AttackSpec(kind, target, start, duration, params))
    return out


def desk_scenario(seed: int = 0, train_steps: int = 88_000, test_steps: int = 30_000) -> Scenario:
    """Five attack kinds, five events each, on the desk traffic.

    ``train_steps`` of 88k ticks yields about 200k messages.
    """
    starts = [2_000, 7_500, 13_000, 18_500, 24_000]
    dur = 2_000
    targets = [("id1", 0), ("id3", 5), ("id2", 2), ("id5", 8), ("id4", 6)]
    attacks: list[AttackSpec] = []
    attacks += _events("flooding", starts, dur, lambda k: (["id6", "id4", "id5", "id6", "id3"][k], {"multiplier": 20}))
    attacks += _events("suppress", starts, dur, lambda k: (["id1", "id3", "id2", "id5", "id4"][k], {}))
    plateau_levels = [None, 0.15, None, 0.85, 0.5]
    attacks += _events(
        "plateau",
        starts,
        dur,
        lambda k: (targets[k][0], {"signals": [targets[k][1]], **({} if plateau_levels[k] is None else {"value": plateau_levels[k]})}),
    )
    drifts = [0.0004, -0.0004, 0.0003, -0.0003, 0.0004]
    attacks += _events("continuous", starts, dur, lambda k: (targets[k][0], {"signals": [targets[k][1]], "drift": drifts[k]}))
    # replay a clean window ending 450 ticks before the event: phase no longer matches
    sources = [0] + [s - dur - 450 for s in starts[1:]]
    attacks += _events("playback", starts, dur, lambda k: (targets[k][0], {"signals": [targets[k][1]], "source_start": sources[k]}))
    return Scenario(desk_traffic(seed), attacks, train_steps, test_steps, seed)
