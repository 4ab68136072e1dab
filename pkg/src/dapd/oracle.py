"""Exact brute-force inference for the modular-sum toy distribution.

The distribution is uniform over the 243 sequences determined by
X1..X5, so every conditional is a ratio of integer counts over the
consistent subset of that support.
"""
import itertools
from collections import defaultdict

import numpy as np

from .decode import MASK, DenoiserOutput
from .toymdm.data import LABELS, NUM_SYMBOLS, NUM_X, SEQ_LEN, complete

SUPPORT = complete(np.array(list(itertools.product(range(NUM_SYMBOLS), repeat=NUM_X))))

EDGES = tuple(
    sorted(
        {
            tuple(sorted(pair))
            for i in range(4)
            for pair in itertools.combinations((i, i + 1, NUM_X + i), 2)
        }
    )
)
ADJACENCY = np.zeros((SEQ_LEN, SEQ_LEN), dtype=bool)
for _a, _b in EDGES:
    ADJACENCY[_a, _b] = ADJACENCY[_b, _a] = True
TRUE_DEGREE = ADJACENCY.sum(axis=1)


class ZeroSupportError(ValueError):
    pass


def parse_observation(text):
    """``"X1=0,Y2=1"`` -> ``{0: 0, 6: 1}``; labels are X1..X5, Y1..Y4."""
    observed = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        label, _, value = item.partition("=")
        label = label.strip().upper()
        if label not in LABELS:
            raise KeyError(f"unknown position label {label!r}")
        val = int(value)
        if not 0 <= val < NUM_SYMBOLS:
            raise ValueError(f"value for {label} must lie in 0..{NUM_SYMBOLS - 1}")
        observed[LABELS.index(label)] = val
    return observed


def observed_from_tokens(tokens):
    return {i: int(v) for i, v in enumerate(tokens) if v != MASK}


def enumerate_consistent(observed):
    """All support sequences agreeing with ``observed`` (possibly none)."""
    keep = np.ones(len(SUPPORT), dtype=bool)
    for pos, val in observed.items():
        if not 0 <= val < NUM_SYMBOLS:
            raise ValueError("observed symbols must lie in {0, 1, 2}")
        keep &= SUPPORT[:, pos] == val
    return SUPPORT[keep]


def _masked(observed):
    return [i for i in range(SEQ_LEN) if i not in observed]


def marginal_counts(observed, positions=None):
    """Integer counts (len(positions), 3) and the consistent-set size."""
    seqs = enumerate_consistent(observed)
    if len(seqs) == 0:
        raise ZeroSupportError("zero support")
    positions = _masked(observed) if positions is None else list(positions)
    counts = np.stack(
        [np.bincount(seqs[:, p], minlength=NUM_SYMBOLS) for p in positions]
    ) if positions else np.zeros((0, NUM_SYMBOLS), dtype=np.int64)
    return counts, len(seqs)


def oracle_marginals(observed, positions=None):
    """Exact p(position = v | observed) for each masked position (row order:
    ascending position unless ``positions`` is given)."""
    counts, total = marginal_counts(observed, positions)
    return counts / total


def _entropy_from_counts(counts):
    counts = np.asarray([c for c in counts if c > 0], dtype=np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def conditional_mi(observed, i, j):
    """I(X_i; X_j | every other position) in nats, given ``observed``.

    Positions other than i and j that are still masked are conditioned on
    too, so this is the pairwise-Markov quantity for the current state.
    """
    if i == j:
        raise ValueError("i and j must differ")
    if i in observed or j in observed:
        raise ValueError("i and j must be masked")
    seqs = enumerate_consistent(observed)
    if len(seqs) == 0:
        raise ZeroSupportError("zero support")
    rest = [p for p in range(SEQ_LEN) if p not in (i, j)]
    groups = defaultdict(list)
    for row in seqs:
        groups[tuple(row[rest])].append((int(row[i]), int(row[j])))
    mi = 0.0
    for pairs in groups.values():
        # uniform support: each group is a uniform distribution over its pairs
        n = len(pairs)
        ci = defaultdict(int)
        cj = defaultdict(int)
        cij = defaultdict(int)
        for a, b in pairs:
            ci[a] += 1
            cj[b] += 1
            cij[(a, b)] += 1
        h = _entropy_from_counts(ci.values()) + _entropy_from_counts(cj.values())
        h -= _entropy_from_counts(cij.values())
        mi += n / len(seqs) * h
    return max(mi, 0.0)


def mi_matrix(observed):
    """Symmetric conditional-MI matrix over the masked positions."""
    positions = _masked(observed)
    n = len(positions)
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            out[a, b] = out[b, a] = conditional_mi(observed, positions[a], positions[b])
    return positions, out


def ground_truth_subgraph(masked):
    """Induced triangle-graph adjacency and degrees on ``masked``."""
    idx = np.asarray(sorted(masked), dtype=np.int64)
    if idx.size == 0:
        raise ValueError("masked set must be non-empty")
    adj = ADJACENCY[np.ix_(idx, idx)]
    return idx, adj, adj.sum(axis=1)


class OracleDenoiser:
    """Exact marginals plus binary ground-truth edge scores.

    The edge scores ride in the attention slot as one layer with one head
    (1 on induced triangle edges, 0 elsewhere), so the DAPD pipeline runs
    unmodified.  They are not row-stochastic.
    """

    def __call__(self, state):
        if len(state.tokens) != SEQ_LEN:
            raise ValueError(f"oracle states have length {SEQ_LEN}")
        observed = observed_from_tokens(state.tokens)
        masked = state.masked
        marg = oracle_marginals(observed, masked)
        scores = np.zeros((SEQ_LEN, SEQ_LEN))
        sub = np.ix_(masked, masked)
        scores[sub] = ADJACENCY[sub]
        return DenoiserOutput(positions=masked, marginals=marg, attention=[scores[None]])
