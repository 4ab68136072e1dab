"""Iterative unmasking loop for masked diffusion denoisers.

A denoiser is any callable ``SequenceState -> DenoiserOutput``.  Each loop
iteration costs one call (one NFE), picks a set of masked positions with the
configured strategy and commits tokens there.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from . import depgraph

MASK = -1
STRATEGIES = ("sequential", "topk", "conf_threshold", "kl_stability", "dapd", "random")
KL_EPS = 1e-10


class DecodeError(RuntimeError):
    pass


@dataclass
class SequenceState:
    tokens: np.ndarray
    prompt_len: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).copy()
        if np.any(self.tokens[: self.prompt_len] == MASK):
            raise ValueError("prompt positions may not be masked")

    @classmethod
    def fully_masked(cls, gen_len, prompt=()):
        prompt = np.asarray(prompt, dtype=np.int64)
        tokens = np.concatenate([prompt, np.full(gen_len, MASK, dtype=np.int64)])
        return cls(tokens=tokens, prompt_len=prompt.size)

    @property
    def gen_len(self):
        return self.tokens.size - self.prompt_len

    @property
    def masked(self):
        return np.flatnonzero(self.tokens == MASK)

    def copy(self):
        return SequenceState(self.tokens, self.prompt_len)


@dataclass
class DenoiserOutput:
    """Marginals for the masked positions (row k <-> positions[k]) and
    per-layer attention maps shaped (heads, L, L)."""

    positions: np.ndarray
    marginals: np.ndarray
    attention: list = field(default_factory=list)

    @property
    def confidence(self):
        return self.marginals.max(axis=1)

    def validate(self, state):
        if not np.array_equal(np.asarray(self.positions), state.masked):
            raise DecodeError("denoiser marginals do not cover exactly the masked positions")
        m = np.asarray(self.marginals)
        if m.ndim != 2 or m.shape[0] != len(self.positions):
            raise DecodeError("malformed marginals shape")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise DecodeError("marginals must be finite and non-negative")
        if np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-5):
            raise DecodeError("marginals must sum to 1")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "dapd"
    k: int = 1
    conf_thresh: float = 0.9
    kl_thresh: float = 0.001
    tau_schedule: depgraph.TauSchedule = depgraph.TauSchedule()
    switch_mask_ratio: float = 0.5
    committer: str = "argmax"
    top_layer_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; valid: {', '.join(STRATEGIES)}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.conf_thresh <= 1:
            raise ValueError("conf_thresh must lie in [0, 1]")
        if self.kl_thresh < 0:
            raise ValueError("kl_thresh must be >= 0")
        if not 0 < self.switch_mask_ratio <= 1:
            raise ValueError("switch_mask_ratio must lie in (0, 1]")
        if self.committer not in ("argmax", "sample"):
            raise ValueError("committer must be 'argmax' or 'sample'")


@dataclass
class StepRecord:
    idx: int
    tau: float | None
    unmasked: list
    tokens: list
    confs: list
    segments: int


@dataclass
class DecodeTrace:
    steps: list = field(default_factory=list)
    final_tokens: list = field(default_factory=list)

    @property
    def nfe(self):
        return len(self.steps)

    def segment_trajectory(self):
        return [s.segments for s in self.steps]

    def to_json(self, seed, strategy):
        return {
            "seed": seed,
            "strategy": strategy,
            "nfe": self.nfe,
            "steps": [
                {
                    "idx": s.idx,
                    "tau": s.tau,
                    "unmasked": s.unmasked,
                    "tokens": s.tokens,
                    "confs": s.confs,
                    "segments": s.segments,
                }
                for s in self.steps
            ],
            "final": self.final_tokens,
        }


def write_traces(path, records):
    """Write ``(seed, strategy, trace)`` triples as line-delimited JSON."""
    with open(path, "w") as fh:
        for seed, strategy, trace in records:
            fh.write(json.dumps(trace.to_json(seed, strategy)) + "\n")


# --------------------------------------------------------------------------
# selectors; all return absolute positions


def _argmax_position(out):
    # np.argmax returns the first maximum, i.e. the lowest masked index
    return [int(out.positions[int(np.argmax(out.confidence))])]


def select_sequential(out):
    return _argmax_position(out)


def select_topk(out, k):
    conf = out.confidence
    order = np.lexsort((np.asarray(out.positions), -conf))
    return [int(out.positions[i]) for i in order[:k]]


def select_conf_threshold(out, thresh):
    picked = [int(p) for p, c in zip(out.positions, out.confidence) if c > thresh]
    return picked or _argmax_position(out)


def kl_divergence(p, q, eps=KL_EPS):
    """Row-wise KL(p || q) after additive smoothing and renormalization."""
    p = np.asarray(p, dtype=np.float64) + eps
    q = np.asarray(q, dtype=np.float64) + eps
    p /= p.sum(axis=-1, keepdims=True)
    q /= q.sum(axis=-1, keepdims=True)
    return np.sum(p * np.log(p / q), axis=-1)


def select_kl_stability(out, prev, conf_thresh, kl_thresh):
    if prev is None:
        return _argmax_position(out)
    prev_row = {int(p): i for i, p in enumerate(prev.positions)}
    rows = [prev_row[int(p)] for p in out.positions]
    kl = kl_divergence(out.marginals, np.asarray(prev.marginals)[rows])
    ok = (out.confidence > conf_thresh) & (kl < kl_thresh)
    picked = [int(p) for p in np.asarray(out.positions)[ok]]
    return picked or _argmax_position(out)


def dapd_graph(out, cfg, progress):
    """Dependency graph over the masked positions at the scheduled threshold."""
    agg = depgraph.aggregate_attention(out.attention, cfg.top_layer_fraction)
    scores = depgraph.symmetrize_scores(agg, out.positions)
    return depgraph.build_graph(scores, depgraph.tau_at(cfg.tau_schedule, progress))


def select_dapd(out, state, cfg, progress):
    """Returns ``(positions, tau)``; tau is None in the confidence phase."""
    ratio = len(out.positions) / state.gen_len
    if ratio < cfg.switch_mask_ratio:
        return select_conf_threshold(out, cfg.conf_thresh), None
    graph = dapd_graph(out, cfg, progress)
    weights = graph.proxy_degree * out.confidence
    return depgraph.welsh_powell_select(graph, weights), graph.threshold


# --------------------------------------------------------------------------


def _commit(marginals, committer, rng):
    if committer == "argmax":
        return marginals.argmax(axis=1)
    cdf = np.cumsum(marginals, axis=1)
    u = rng.random(marginals.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=1), marginals.shape[1] - 1)


def decode(denoiser, strategy, initial, rng_seed=0):
    """Unmask ``initial`` to completion.  Returns ``(final_state, trace)``."""
    state = initial.copy()
    n_initial = len(state.masked)
    if n_initial == 0:
        raise ValueError("initial state has no masked positions")
    if np.any(state.masked < state.prompt_len):
        raise ValueError("prompt positions may not be masked")
    rng = np.random.default_rng(rng_seed)
    trace = DecodeTrace()
    prev = None
    while True:
        masked = state.masked
        if masked.size == 0:
            break
        out = denoiser(state)
        out.validate(state)
        tau = None
        progress = (n_initial - masked.size) / n_initial
        kind = strategy.kind
        if kind == "sequential":
            chosen = select_sequential(out)
        elif kind == "topk":
            chosen = select_topk(out, strategy.k)
        elif kind == "conf_threshold":
            chosen = select_conf_threshold(out, strategy.conf_thresh)
        elif kind == "kl_stability":
            chosen = select_kl_stability(out, prev, strategy.conf_thresh, strategy.kl_thresh)
        elif kind == "dapd":
            chosen, tau = select_dapd(out, state, strategy, progress)
        else:
            chosen = [int(rng.choice(masked))]

        chosen = sorted(chosen)
        if not chosen or len(set(chosen)) != len(chosen) or np.any(state.tokens[chosen] != MASK):
            raise DecodeError(f"strategy {kind} selected invalid positions {chosen}")
        row_of = {int(p): i for i, p in enumerate(out.positions)}
        rows = [row_of[p] for p in chosen]
        marg = np.asarray(out.marginals)[rows]
        values = _commit(marg, strategy.committer, rng)
        state.tokens[chosen] = values
        trace.steps.append(
            StepRecord(
                idx=len(trace.steps) + 1,
                tau=tau,
                unmasked=chosen,
                tokens=[int(v) for v in values],
                confs=[float(c) for c in marg.max(axis=1)],
                segments=depgraph.segment_count(state.tokens, (state.prompt_len, state.tokens.size)),
            )
        )
        prev = out
    trace.final_tokens = [int(v) for v in state.tokens]
    return state, trace
