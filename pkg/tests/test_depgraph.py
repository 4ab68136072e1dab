import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dapd.depgraph import (
    EdgeScoreMatrix,
    TauSchedule,
    aggregate_attention,
    build_graph,
    segment_count,
    symmetrize_scores,
    tau_at,
    welsh_powell_select,
)
from dapd.oracle import ADJACENCY, TRUE_DEGREE
from dapd.toymdm.data import LABELS

X1, X2, X3, X4, X5, Y1, Y2, Y3, Y4 = range(9)


def graph_from(adj, positions=None, weights_as_scores=None):
    adj = np.asarray(adj, dtype=bool)
    n = adj.shape[0]
    positions = tuple(range(n)) if positions is None else tuple(positions)
    scores = adj.astype(float) if weights_as_scores is None else weights_as_scores
    return build_graph(EdgeScoreMatrix(positions, scores), 0.5)


def is_independent(adj, chosen_idx):
    return not any(adj[a, b] for a, b in itertools.combinations(chosen_idx, 2))


def is_maximal(adj, chosen_idx):
    chosen = set(chosen_idx)
    return all(any(adj[v, c] for c in chosen) for v in range(adj.shape[0]) if v not in chosen)


# -- aggregate_attention ----------------------------------------------------


def test_aggregate_mean_of_two_layers():
    a = np.full((1, 3, 3), 1 / 3)
    b = np.full((1, 3, 3), 1 / 3)
    a[0, 1] = [0.4, 0.0, 0.6]
    a[0, 1, 2], b[0, 1, 2] = 0.2, 0.6
    agg = aggregate_attention([a, b], top_layer_fraction=1.0)
    assert agg[1, 2] == pytest.approx(0.4)


def test_aggregate_selects_top_quarter_of_eight_layers():
    layers = [np.full((2, 4, 4), float(i)) for i in range(1, 9)]
    agg = aggregate_attention(layers, 0.25)
    # layers 7 and 8 (1-indexed)
    assert np.allclose(agg, 7.5)


def test_aggregate_single_layer_identity():
    rng = np.random.default_rng(0)
    a = rng.dirichlet(np.ones(5), size=5)[None]
    assert np.array_equal(aggregate_attention([a], 0.25), a[0])


def test_aggregate_averages_heads():
    a = np.stack([np.eye(3), np.full((3, 3), 1 / 3)])
    assert np.allclose(aggregate_attention([a, a], 0.5), 0.5 * (np.eye(3) + 1 / 3))


def test_aggregate_empty_stack():
    with pytest.raises(ValueError, match="no attention layers"):
        aggregate_attention([])


# -- symmetrize_scores ------------------------------------------------------


def test_symmetrize_definition():
    agg = np.zeros((4, 4))
    agg[1, 3], agg[3, 1] = 0.2, 0.4
    es = symmetrize_scores(agg, [1, 3])
    assert es.scores[0, 1] == pytest.approx(0.3)
    assert es.scores[1, 0] == pytest.approx(0.3)
    assert es.positions == (1, 3)


def test_symmetrize_fixed_point_on_symmetric_input():
    rng = np.random.default_rng(1)
    a = rng.random((6, 6))
    a = a + a.T
    es = symmetrize_scores(a, [0, 2, 5])
    sub = a[np.ix_([0, 2, 5], [0, 2, 5])].copy()
    np.fill_diagonal(sub, 0)
    assert np.allclose(es.scores, sub)


def test_symmetrize_single_position():
    es = symmetrize_scores(np.random.default_rng(2).random((5, 5)), [3])
    assert es.scores.shape == (1, 1) and es.scores[0, 0] == 0


def test_symmetrize_rejects_duplicates():
    with pytest.raises(ValueError):
        symmetrize_scores(np.eye(3), [1, 1])


@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_symmetrize_exact_symmetry(n, seed):
    rng = np.random.default_rng(seed)
    agg = rng.dirichlet(np.ones(n), size=n)
    masked = np.sort(rng.choice(n, size=rng.integers(1, n + 1), replace=False))
    s = symmetrize_scores(agg, masked).scores
    assert np.array_equal(s, s.T)
    assert np.all(np.diag(s) == 0) and np.all(s >= 0)


# -- tau schedule -------------------------------------------------------------


def test_tau_schedule_values():
    sched = TauSchedule(0.01, 0.05)
    assert tau_at(sched, 0.0) == pytest.approx(0.01)
    assert tau_at(sched, 0.5) == pytest.approx(0.03)
    assert tau_at(sched, 1.0) == pytest.approx(0.05)
    const = TauSchedule(0.02, 0.02)
    assert all(tau_at(const, p) == pytest.approx(0.02) for p in (0, 0.3, 1))


@pytest.mark.parametrize("progress", [-0.01, 1.01])
def test_tau_out_of_range(progress):
    with pytest.raises(ValueError):
        tau_at(TauSchedule(), progress)


def test_tau_schedule_validation():
    with pytest.raises(ValueError):
        TauSchedule(0.05, 0.01)
    with pytest.raises(ValueError):
        TauSchedule(-0.1, 0.1)


# -- build_graph ----------------------------------------------------------------


def test_build_graph_empty():
    g = build_graph(EdgeScoreMatrix((0, 1, 2), np.zeros((3, 3))), 0.0)
    assert g.num_edges() == 0 and np.all(g.proxy_degree == 0)


def test_build_graph_three_nodes():
    s = np.array([[0, 0.3, 0.05], [0.3, 0, 0.0], [0.05, 0.0, 0]])
    g = build_graph(EdgeScoreMatrix((0, 1, 2), s), 0.1)
    assert g.adjacency.tolist() == [[False, True, False], [True, False, False], [False] * 3]
    assert np.allclose(g.proxy_degree, [0.35, 0.30, 0.05])
    assert g.threshold == 0.1


def test_build_graph_strict_inequality():
    s = np.array([[0, 0.2], [0.2, 0]])
    assert build_graph(EdgeScoreMatrix((0, 1), s), 0.2).num_edges() == 0
    assert build_graph(EdgeScoreMatrix((0, 1), s), 0.19999).num_edges() == 1


@given(st.integers(2, 10), st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone_and_degree_invariant(n, seed, t1, t2):
    rng = np.random.default_rng(seed)
    a = rng.random((n, n))
    s = 0.5 * (a + a.T)
    np.fill_diagonal(s, 0)
    es = EdgeScoreMatrix(tuple(range(n)), s)
    lo, hi = sorted((t1, t2))
    g_lo, g_hi = build_graph(es, lo), build_graph(es, hi)
    assert g_hi.num_edges() <= g_lo.num_edges()
    assert not np.any(g_hi.adjacency & ~g_lo.adjacency)
    assert np.array_equal(g_lo.proxy_degree, g_hi.proxy_degree)
    assert np.array_equal(g_lo.adjacency, g_lo.adjacency.T)
    if hi >= s.max():
        assert g_hi.num_edges() == 0


# -- welsh_powell_select ----------------------------------------------------------


def test_wp_hand_trace():
    adj = np.zeros((3, 3), dtype=bool)
    adj[0, 1] = adj[1, 0] = True
    g = graph_from(adj, positions=(10, 11, 12))
    assert sorted(welsh_powell_select(g, [0.45, 0.40, 0.0])) == [10, 12]


def test_wp_clique_picks_max_weight():
    k = 6
    adj = ~np.eye(k, dtype=bool)
    w = [0.1, 0.5, 0.9, 0.2, 0.3, 0.4]
    assert welsh_powell_select(graph_from(adj), w) == [2]


def test_wp_edgeless_takes_all():
    g = graph_from(np.zeros((5, 5), dtype=bool))
    assert sorted(welsh_powell_select(g, np.ones(5))) == list(range(5))


def test_wp_tie_break_by_position():
    adj = np.ones((3, 3), dtype=bool) & ~np.eye(3, dtype=bool)
    g = graph_from(adj, positions=(7, 4, 9))
    assert welsh_powell_select(g, [1.0, 1.0, 1.0]) == [4]


def test_wp_toy_ground_truth_graph():
    g = graph_from(ADJACENCY)
    chosen = welsh_powell_select(g, TRUE_DEGREE)
    assert sorted(chosen) == [X2, X4]


def test_wp_toy_three_colour_classes():
    remaining = list(range(9))
    classes = []
    while remaining:
        sub = ADJACENCY[np.ix_(remaining, remaining)]
        g = graph_from(sub, positions=remaining)
        chosen = sorted(welsh_powell_select(g, sub.sum(axis=1)))
        classes.append([LABELS[c] for c in chosen])
        remaining = [r for r in remaining if r not in chosen]
    assert classes == [["X2", "X4"], ["X1", "X3", "X5"], ["Y1", "Y2", "Y3", "Y4"]]


def test_wp_errors():
    g = graph_from(np.zeros((2, 2), dtype=bool))
    with pytest.raises(ValueError):
        welsh_powell_select(g, [1.0])
    with pytest.raises(ValueError):
        welsh_powell_select(g, [1.0, np.nan])
    empty = build_graph(EdgeScoreMatrix((), np.zeros((0, 0))), 0.1)
    with pytest.raises(ValueError, match="no masked positions"):
        welsh_powell_select(empty, [])


@settings(max_examples=200)
@given(st.integers(1, 32), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_wp_independent_maximal_deterministic(n, density, seed):
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n, n)) < density, 1)
    adj = upper | upper.T
    w = rng.random(n)
    g = graph_from(adj)
    chosen = welsh_powell_select(g, w)
    assert chosen
    assert is_independent(adj, chosen)
    assert is_maximal(adj, chosen)
    assert int(np.argmax(w)) in chosen
    assert welsh_powell_select(g, w) == chosen


# -- segment_count --------------------------------------------------------------


@pytest.mark.parametrize(
    "pattern, expected",
    [("MMMMM", 0), ("UUMMU", 2), ("UUUUU", 1), ("MUMUM", 2), ("", 0), ("UMUMU", 3)],
)
def test_segment_count(pattern, expected):
    tokens = np.array([-1 if c == "M" else 1 for c in pattern], dtype=int)
    assert segment_count(tokens) == expected


def test_segment_count_region():
    tokens = np.array([1, 1, -1, 1, 1, -1, 1])
    assert segment_count(tokens, (2, 7)) == 2
    with pytest.raises(ValueError):
        segment_count(tokens, (0, 8))
