"""Attention-derived dependency graphs and degree-ordered independent sets."""
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EdgeScoreMatrix:
    """Symmetric pairwise scores over the masked positions, zero diagonal."""

    positions: tuple
    scores: np.ndarray

    @property
    def n(self):
        return len(self.positions)


@dataclass(frozen=True)
class DependencyGraph:
    positions: tuple
    adjacency: np.ndarray
    proxy_degree: np.ndarray
    threshold: float

    @property
    def n(self):
        return len(self.positions)

    def num_edges(self):
        return int(np.triu(self.adjacency, 1).sum())


@dataclass(frozen=True)
class TauSchedule:
    tau_min: float = 0.01
    tau_max: float = 0.05

    def __post_init__(self):
        if self.tau_min < 0 or self.tau_max < self.tau_min:
            raise ValueError("need 0 <= tau_min <= tau_max")


def aggregate_attention(attention, top_layer_fraction=0.25):
    """Mean attention over all heads of the top ceil(fraction * layers) layers.

    ``attention`` is a sequence of per-layer arrays shaped (heads, L, L), or a
    single (layers, heads, L, L) array.
    """
    if attention is None or len(attention) == 0:
        raise ValueError("no attention layers")
    if not 0 < top_layer_fraction <= 1:
        raise ValueError("top_layer_fraction must lie in (0, 1]")
    n_layers = len(attention)
    n_top = max(1, math.ceil(top_layer_fraction * n_layers - 1e-9))
    top = [np.asarray(a, dtype=np.float64) for a in attention[n_layers - n_top:]]
    return np.mean([a.mean(axis=0) for a in top], axis=0)


def symmetrize_scores(agg, masked):
    """s_ij = (a_ij + a_ji) / 2 restricted to mask-to-mask pairs."""
    idx = np.asarray(masked, dtype=np.int64)
    if len(set(idx.tolist())) != idx.size:
        raise ValueError("masked indices must be distinct")
    sub = np.asarray(agg, dtype=np.float64)[np.ix_(idx, idx)]
    scores = 0.5 * (sub + sub.T)
    np.fill_diagonal(scores, 0.0)
    return EdgeScoreMatrix(positions=tuple(int(i) for i in idx), scores=scores)


def tau_at(schedule, progress):
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return schedule.tau_min + (schedule.tau_max - schedule.tau_min) * progress


def build_graph(scores, tau):
    """Edges where s_ij > tau (strict); proxy degrees from the raw scores."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    s = scores.scores
    adjacency = s > tau
    np.fill_diagonal(adjacency, False)
    return DependencyGraph(
        positions=scores.positions,
        adjacency=adjacency,
        proxy_degree=s.sum(axis=1),
        threshold=float(tau),
    )


def welsh_powell_order(weights, positions):
    """Node indices by non-increasing weight, ties by ascending position."""
    weights = np.asarray(weights, dtype=np.float64)
    return np.lexsort((np.asarray(positions), -weights))


def welsh_powell_select(graph, weights):
    """Greedy maximal independent set scanning nodes by decreasing weight.

    Returns the selected absolute positions in scan order.
    """
    if graph.n == 0:
        raise ValueError("no masked positions")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (graph.n,):
        raise ValueError("weights length must match the node count")
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    blocked = np.zeros(graph.n, dtype=bool)
    chosen = []
    for node in welsh_powell_order(weights, graph.positions):
        if blocked[node]:
            continue
        chosen.append(graph.positions[node])
        blocked |= graph.adjacency[node]
        blocked[node] = True
    return chosen


def segment_count(tokens, region=None, mask=-1):
    """Number of maximal runs of unmasked entries of ``tokens[region]``.

    ``tokens`` may be a token array or a ``SequenceState``; ``region`` is a
    half-open ``(lo, hi)`` pair and defaults to the whole sequence.
    """
    tokens = np.asarray(getattr(tokens, "tokens", tokens))
    lo, hi = (0, tokens.size) if region is None else region
    if not 0 <= lo <= hi <= tokens.size:
        raise ValueError("region outside sequence bounds")
    unmasked = tokens[lo:hi] != mask
    if unmasked.size == 0:
        return 0
    starts = unmasked[1:] & ~unmasked[:-1]
    return int(unmasked[0]) + int(starts.sum())
