import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canguard.ingest import SignalRecord
from canguard.preprocess import (
    FILL_VALUE,
    BudgetTooSmall,
    DataQueue,
    DegenerateInput,
    Preprocessor,
    QueueTooShallow,
    Scaler,
    SignalOrder,
    UnseenSignal,
    abs_correlation,
    fit_order,
    fit_scaler,
    forward_fill,
    queue_depth,
    sample_views,
    select_signals,
    warmup_end,
    window_batch,
    window_truth,
)


def locf_oracle(history, m, q):
    """Rebuild the queue from scratch: column j = step (t - j), carried forward."""
    t = len(history) - 1
    grid = np.full((m, q), FILL_VALUE)
    for j in range(q):
        step = t - j
        for r in range(m):
            v = FILL_VALUE
            for s in range(step, -1, -1):
                hit = [val for row, val in history[s] if row == r]
                if hit:
                    v = hit[-1]
                    break
            grid[r, j] = v
    return grid


# ------------------------------------------------------------- ordering


def test_identical_pair_adjacent_matches_brute_force():
    rng = np.random.default_rng(1)
    base = rng.normal(size=400)
    x = np.stack([base, rng.normal(size=400), base])
    c = abs_correlation(x)

    def adj(order):
        return sum(c[a, b] for a, b in zip(order, order[1:]))

    best = max(itertools.permutations(range(3)), key=adj)
    perm = fit_order(x).permutation
    assert abs(perm.index(0) - perm.index(2)) == 1
    assert adj(perm) == pytest.approx(adj(best))


def test_order_single_signal():
    assert fit_order(np.array([[1.0, 2.0, 3.0]])).permutation == [0]


def test_order_all_constant_keeps_input_order():
    assert fit_order(np.ones((4, 20))).permutation == [0, 1, 2, 3]


def test_order_degenerate():
    with pytest.raises(DegenerateInput):
        fit_order(np.ones((3, 1)))


def test_anticorrelated_signals_cluster():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=300), rng.normal(size=300)
    x = np.stack([a, b, -a, b + 0.01 * rng.normal(size=300)])
    perm = fit_order(x).permutation
    assert abs(perm.index(0) - perm.index(2)) == 1
    assert abs(perm.index(1) - perm.index(3)) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_order_is_bijection_and_keeps_rows(m, seed):
    x = np.random.default_rng(seed).normal(size=(m, 30))
    order = fit_order(x)
    assert sorted(order.permutation) == list(range(m))
    moved = order.apply(x)
    assert sorted(map(tuple, moved)) == sorted(map(tuple, x))
    np.testing.assert_array_equal(order.restore(moved), x)


# ------------------------------------------------------------ selection


def test_select_greedy_rule():
    corr = np.eye(4)
    corr[0, 1] = corr[1, 0] = 0.9
    corr[0, 2] = corr[2, 0] = 0.2
    corr[0, 3] = corr[3, 0] = -0.8
    assert select_signals({0}, corr, 3) == [0, 1, 3]


def test_select_exhaustive_agrees_with_greedy():
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, (7, 7))
    corr = (a + a.T) / 2
    np.fill_diagonal(corr, 1)
    crit = {1, 4}
    got = select_signals(crit, corr, 4)

    def gain(s):
        return sorted((max(abs(corr[c, i]) for c in crit) for i in s), reverse=True)

    best = max(
        (sorted(crit | set(extra)) for extra in itertools.combinations([i for i in range(7) if i not in crit], 2)),
        key=lambda s: gain(set(s) - crit),
    )
    assert got == best


def test_select_full_budget_and_errors():
    corr = np.eye(5)
    assert select_signals({2}, corr, 5) == [0, 1, 2, 3, 4]
    with pytest.raises(BudgetTooSmall):
        select_signals({0, 1, 2}, corr, 2)


def test_select_two_partners_per_critical():
    rng = np.random.default_rng(4)
    base = rng.normal(size=(4, 500))
    rows = []
    for k in range(4):
        rows.append(base[k])
        rows.append(base[k] + 0.1 * rng.normal(size=500))
        rows.append(base[k] + 0.2 * rng.normal(size=500))
    rows += [rng.normal(size=500) for _ in range(8)]
    corr = abs_correlation(np.stack(rows))
    crit = {0, 3, 6, 9}
    chosen = select_signals(crit, corr, 12, per_critical=2)
    assert len(chosen) == 12
    assert chosen == sorted(range(12))


# --------------------------------------------------------------- scaler


def test_scaler_midpoint_and_clamp():
    s = fit_scaler(np.array([[10.0, 30.0, 20.0]]))
    assert s.transform_value(0, 20.0) == 0.5
    assert s.transform_value(0, 35.0) == 1.0
    assert s.transform_value(0, 0.0) == 0.0


def test_scaler_constant_maps_to_half():
    s = fit_scaler(np.array([[3.0, 3.0]]))
    assert s.transform_value(0, 3.0) == 0.5
    np.testing.assert_array_equal(s.transform(np.array([[3.0, 9.0]])), [[0.5, 0.5]])


def test_scaler_identity_on_unit_range():
    x = np.random.default_rng(0).uniform(0, 1, (4, 100))
    x[:, 0], x[:, 1] = 0.0, 1.0
    np.testing.assert_allclose(fit_scaler(x).transform(x), x, atol=1e-12)


def test_scaler_unseen_signal():
    x = np.array([[1.0, np.nan], [np.nan, np.nan]])
    with pytest.raises(UnseenSignal):
        fit_scaler(x)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(1e-3, 1e6), st.floats(0, 1))
def test_scaler_inverse(lo, width, u):
    s = Scaler([lo], [lo + width])
    v = lo + u * width
    back = s.inverse_transform(s.transform(np.array([[v]])))[0, 0]
    assert abs(back - v) <= 1e-9 * max(1.0, abs(v), width)


# ---------------------------------------------------------------- queue


def test_new_arrival_changes_only_its_row():
    # IDs A, D, C arrive at t-2, t-1, t; rows: A->0, D->1, C->2
    q = DataQueue(3, 4)
    q.push([(0, 0.1)]).push([(1, 0.2)]).push([(2, 0.3)])
    g = q.grid
    assert g[2, 0] != g[2, 1]
    assert g[0, 0] == g[0, 1] and g[1, 0] == g[1, 1]
    np.testing.assert_array_equal(g[:, 0], [0.1, 0.2, 0.3])
    np.testing.assert_array_equal(g[:, 1], [0.1, 0.2, FILL_VALUE])


def test_same_record_twice():
    q = DataQueue(2, 5)
    q.push([(0, 0.7)]).push([(0, 0.7)])
    np.testing.assert_array_equal(q.grid[:, 0], q.grid[:, 1])


def test_readiness():
    q = DataQueue(2, 3)
    q.push([(0, 0.1)]).push([(0, 0.1)]).push([(0, 0.1)])
    assert not q.ready
    q.push([(1, 0.9)])
    assert q.ready and q.initialized_mask.all()


def _random_history(rng, m, n):
    hist = []
    for _ in range(n):
        k = rng.integers(1, m + 1)
        rows = rng.choice(m, size=k, replace=False)
        hist.append([(int(r), float(rng.random())) for r in rows])
    return hist


def test_queue_matches_locf_oracle_every_step():
    rng = np.random.default_rng(5)
    m, q = 4, 12
    hist = _random_history(rng, m, 200)
    dq = DataQueue(m, q)
    for t, vals in enumerate(hist):
        dq.push(vals)
        np.testing.assert_array_equal(dq.grid, locf_oracle(hist[: t + 1], m, q))


def _prep(m):
    return Preprocessor(Scaler([0.0] * m, [1.0] * m), SignalOrder(list(range(m))))


def test_batch_fill_equals_queue():
    rng = np.random.default_rng(6)
    m, q = 3, 10
    hist = _random_history(rng, m, 120)
    recs = [SignalRecord(float(k), "x", tuple(v), int(rng.random() < 0.1)) for k, v in enumerate(hist)]
    filled, labels, first = forward_fill(recs, _prep(m))
    dq = DataQueue(m, q)
    for t, rec in enumerate(recs):
        dq.push(rec.values, rec.label)
        lo = max(0, t - q + 1)
        np.testing.assert_array_equal(dq.grid[:, : t - lo + 1], filled[:, lo : t + 1][:, ::-1])
        if dq.ready:
            assert t >= warmup_end(first, q)


# ---------------------------------------------------------------- views


def _filled_queue(m, q, n, seed=0):
    rng = np.random.default_rng(seed)
    dq = DataQueue(m, q)
    for _ in range(n):
        dq.push([(r, float(rng.random())) for r in range(m) if rng.random() < 0.5], rng.random() < 0.05)
    return dq


def test_view_spans():
    w = 50
    dq = _filled_queue(2, queue_depth([1, 5, 10], w), 600)
    views = sample_views(dq, [1, 5, 10], w)
    assert [v.grid.shape for v in views] == [(2, 50)] * 3
    assert [v.period * v.width for v in views] == [50, 250, 500]
    assert len({v.origin_step for v in views}) == 1


def test_period_one_is_verbatim():
    dq = _filled_queue(3, 20, 40)
    (v,) = sample_views(dq, [1], 20)
    np.testing.assert_array_equal(v.grid, dq.grid)


def test_view_column_index_arithmetic():
    dq = _filled_queue(2, 500, 700)
    (v,) = sample_views(dq, [10], 50)
    np.testing.assert_array_equal(v.grid[:, 49], dq.grid[:, 490])


def test_strided_view_equals_manual_striding():
    dq = _filled_queue(3, 60, 100, seed=2)
    (full,) = sample_views(dq, [1], 60)
    (v,) = sample_views(dq, [3], 20)
    np.testing.assert_array_equal(v.grid, full.grid[:, ::3])


def test_view_labels_are_or_of_covered_steps():
    dq = DataQueue(1, 20)
    for k in range(20):
        dq.push([(0, 0.5)], label=(k == 12))
    # step 12 sits in queue column 7 -> block 1 of period 5
    (v,) = sample_views(dq, [5], 4)
    assert v.labels.tolist() == [False, True, False, False]


def test_queue_too_shallow():
    dq = DataQueue(2, 100)
    with pytest.raises(QueueTooShallow):
        sample_views(dq, [1, 5], 50)


def test_window_batch_equals_sample_views():
    rng = np.random.default_rng(8)
    m, periods, w = 3, [1, 2, 4], 6
    q = queue_depth(periods, w)
    hist = _random_history(rng, m, 80)
    recs = [SignalRecord(float(k), "x", tuple(v), int(rng.random() < 0.2)) for k, v in enumerate(hist)]
    filled, labels, first = forward_fill(recs, _prep(m))
    dq = DataQueue(m, q)
    for t, rec in enumerate(recs):
        dq.push(rec.values, rec.label)
        if t < q - 1:
            continue
        views = sample_views(dq, periods, w)
        for v in views:
            g, lab = window_batch(filled, labels, np.array([t]), v.period, w)
            np.testing.assert_array_equal(g[0], v.grid)
            np.testing.assert_array_equal(lab[0], v.labels)
        truth = window_truth(labels, np.array([t]), q)[0]
        assert truth == any(v.labels.any() for v in views)


def test_preprocessor_round_trip(tmp_path):
    prep = Preprocessor(Scaler([0.0, 1.0], [2.0, 3.0]), SignalOrder([1, 0], [[0.0, 1.0, 0.5, 2.0]]))
    prep.save(tmp_path)
    back = Preprocessor.load(tmp_path)
    assert back.scaler == prep.scaler and back.order == prep.order
    rec = SignalRecord(0.0, "x", ((0, 1.0), (1, 2.5)))
    assert back.encode(rec) == [(1, 0.5), (0, 0.75)]
