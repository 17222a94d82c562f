import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acmoe.metrics import (
    assignment_percentages,
    instability_report,
    load_balance,
    router_instability,
    steps_to_threshold,
    summary_json,
    trailing_mean,
    transform_build_scaling,
    routing_overhead,
)
from acmoe.router import select_topk
from oracles import comembership_instability, population_std_pct

labelings = st.integers(1, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 5), min_size=n, max_size=n),
                        st.lists(st.integers(0, 5), min_size=n, max_size=n)))


def labels_for(percent, n=100):
    return np.repeat(np.arange(len(percent)), np.asarray(percent) * n // 100)


# --- load balance --------------------------------------------------------


def test_load_balance_fixtures():
    assert load_balance([labels_for([25, 25, 25, 25])], 4).mean == 0.0
    assert load_balance([labels_for([40, 10, 25, 25])], 4).mean == pytest.approx(10.606601717798213, abs=1e-12)
    assert load_balance([np.zeros(50, int)], 4).mean == pytest.approx(43.30127018922193, abs=1e-12)
    assert population_std_pct([40, 10, 25, 25]) == pytest.approx(10.606601717798213, abs=1e-12)


def test_load_balance_across_layers():
    rep = load_balance([labels_for([25, 25, 25, 25]), labels_for([40, 10, 25, 25])], 4)
    np.testing.assert_allclose(rep.per_layer, [0.0, 10.606601717798213])
    assert rep.mean == pytest.approx(5.303300858899107)
    assert rep.std == pytest.approx(5.303300858899107)
    assert rep.to_csv().splitlines() == ["layer,value", "0,0.0", "1,10.606601717798213"]


def test_load_balance_from_decisions():
    scores = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    rep = load_balance([select_topk(scores, 2)])
    assert rep.mean == pytest.approx(population_std_pct([2, 1, 1]))
    with pytest.raises(ValueError):
        load_balance([])


@given(st.lists(st.integers(0, 4), min_size=1, max_size=60), st.permutations(range(5)), st.randoms())
def test_load_balance_permutation_invariant(labels, perm, rnd):
    a = np.array(labels)
    b = np.array(perm)[a]
    shuffled = list(b)
    rnd.shuffle(shuffled)
    base = load_balance([a], 5).mean
    assert load_balance([b], 5).mean == pytest.approx(base, abs=1e-12)
    assert load_balance([np.array(shuffled)], 5).mean == pytest.approx(base, abs=1e-12)
    assert base >= 0
    assert population_std_pct(np.bincount(a, minlength=5)) == pytest.approx(base, abs=1e-12)


def test_assignment_percentages():
    np.testing.assert_array_equal(assignment_percentages([0, 0, 1, 3], 4), [50.0, 25.0, 0.0, 25.0])


# --- instability ---------------------------------------------------------


def test_instability_fixtures():
    assert router_instability([0, 0, 1, 1], [0, 0, 1, 1]) == 0.0
    assert router_instability([0, 0, 1, 1], [0, 1, 1, 1]) == 0.375
    assert router_instability([0, 0, 0, 0], [0, 1, 2, 3]) == 0.75
    assert comembership_instability([0, 0, 1, 1], [0, 1, 1, 1]) == 0.375


def test_instability_errors():
    with pytest.raises(ValueError):
        router_instability([0, 1], [0, 1, 2])
    assert router_instability([], []) == 0.0


@given(labelings)
def test_instability_matches_matrix_oracle(pair):
    a, b = map(np.array, pair)
    v = router_instability(a, b)
    assert v == pytest.approx(comembership_instability(a, b), abs=1e-15)
    assert 0.0 <= v <= 1.0
    assert v == router_instability(b, a)


@given(labelings, st.permutations(range(6)), st.permutations(range(6)))
def test_instability_relabel_invariant(pair, p, q):
    a, b = map(np.array, pair)
    assert router_instability(np.array(p)[a], np.array(q)[b]) == router_instability(a, b)


def test_instability_report_csv_and_summary():
    rep = instability_report([np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), np.array([0, 1, 1, 1])])
    np.testing.assert_array_equal(rep.per_pair, [0.375, 0.0])
    assert rep.to_csv().splitlines() == ["layer,value", "1,0.375", "2,0.0"]
    lb = load_balance([np.array([0, 1])], 2)
    s = json.loads(summary_json(lb, rep))
    assert s["instability_mean"] == 0.1875 and s["load_balance_mean"] == 0.0


def test_instability_large_n_linear_memory():
    gen = np.random.default_rng(0)
    a = gen.integers(0, 16, 200_000)
    b = np.where(gen.random(200_000) < 0.9, a, gen.integers(0, 16, 200_000))
    v = router_instability(a, b)
    assert 0 < v < 0.2


# --- convergence ---------------------------------------------------------


def test_trailing_mean():
    np.testing.assert_allclose(trailing_mean([1, 2, 3, 4], 2), [1.0, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(trailing_mean([3.0], 10), [3.0])


def test_steps_to_threshold_fixtures():
    assert steps_to_threshold([5, 4, 3, 2, 1], 2.5, window=1) == 3
    assert steps_to_threshold([5, 4, 3, 2, 1], 9.0) == 0
    assert steps_to_threshold([5, 4, 3, 2, 1], 0.5) is None
    with pytest.raises(ValueError):
        steps_to_threshold([], 1.0)


def test_steps_to_threshold_trace():
    class T:
        eval_steps = [0, 10, 20, 30]
        eval_loss = [4.0, 2.0, 1.0, 0.5]
    assert steps_to_threshold(T(), 1.4, window=1) == 20
    assert steps_to_threshold(T(), 1.4, window=2) == 30


@given(st.lists(st.floats(0, 10), min_size=1, max_size=50), st.floats(0, 10), st.floats(0, 10), st.integers(1, 10))
def test_steps_to_threshold_monotone(values, t1, t2, w):
    lo, hi = sorted((t1, t2))
    s_lo = steps_to_threshold(values, lo, w)
    s_hi = steps_to_threshold(values, hi, w)
    if s_lo is not None:
        assert s_hi is not None and s_hi <= s_lo


# --- benchmarks (shape only; timing criteria live in the acceptance suite)


def test_routing_overhead_shape():
    r = routing_overhead(n=256, d=8, E=4, n_iters=3, warmup=1)
    assert set(r) == {"standard", "ac"} and r["standard"] > 0 and r["ac"] > 0
    r = routing_overhead(n=256, d=8, E=4, n_iters=3, warmup=1, interleave=False)
    assert r["ac"] > 0


def test_transform_build_scaling_shape():
    r = transform_build_scaling(ns=(500, 5000), d=8, E=4, n_iters=3)
    assert r["n"] == [500, 5000] and len(r["ms"]) == 2 and np.isfinite(r["slope"])
