"""Edge-detection and degree-ordering metrics, plus decode-quality summaries."""
import csv
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import depgraph, oracle
from .decode import SequenceState, StrategyConfig, decode
from .toymdm.data import SEQ_LEN, is_valid

EVAL_STEPS = 7


def roc_auc(scores, labels):
    """Mann-Whitney AUC; tied scores contribute 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def edge_ratio(scores, labels):
    """Mean edge score over mean non-edge score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("edge ratio undefined: need both edges and non-edges")
    non_edge = scores[~labels].mean()
    if non_edge <= 0:
        raise ValueError("edge ratio undefined: non-edge mean is zero")
    return float(scores[labels].mean() / non_edge)


def ovr(proxy, true_deg):
    """Order violation rate over all C(n, 2) pairs."""
    proxy = np.asarray(proxy, dtype=np.float64)
    true_deg = np.asarray(true_deg)
    n = proxy.size
    if n < 2 or true_deg.size != n:
        raise ValueError("ovr needs two equal-length vectors with n >= 2")
    strictly_less = true_deg[:, None] < true_deg[None, :]
    reversed_ = proxy[:, None] > proxy[None, :]
    return float((strictly_less & reversed_).sum() / math.comb(n, 2))


def validity_rate(sequences):
    seqs = np.atleast_2d(np.asarray(sequences))
    if seqs.size == 0:
        raise ValueError("no sequences")
    return float(is_valid(seqs).mean())


def tv_distance(sequences):
    """TV distance between the empirical law of ``sequences`` and the uniform
    law over the 243 valid sequences.  Accepts a (n, 9) array or a
    ``{tuple: count}`` histogram."""
    if isinstance(sequences, dict):
        hist = Counter({tuple(k): v for k, v in sequences.items()})
    else:
        hist = Counter(map(tuple, np.atleast_2d(np.asarray(sequences)).tolist()))
    total = sum(hist.values())
    exact = 1.0 / len(oracle.SUPPORT)
    support = set(map(tuple, oracle.SUPPORT.tolist()))
    dist = sum(abs(c / total - (exact if k in support else 0.0)) for k, c in hist.items())
    dist += exact * len(support - set(hist))
    return 0.5 * dist


# --------------------------------------------------------------------------
# graph evaluation


@dataclass
class GraphEvalReport:
    per_step: list
    overall: dict
    paths: int
    seeds: list = field(default_factory=list)

    def to_json(self):
        return asdict(self)

    def write(self, json_path, csv_path):
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        cols = ["step", "auc", "auc_std", "edge_nonedge_ratio", "ratio_std", "ovr", "ovr_std",
                "n_auc", "n_ratio", "n_ovr"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.per_step:
                w.writerow([row["step"], row["auc"], row["auc_std"], row["edge_nonedge_ratio"],
                            row["ratio_std"], row["ovr"], row["ovr_std"], *row["counts"].values()])


def step_metrics(out, top_layer_fraction=0.25):
    """(auc, ratio, ovr) for one denoiser output; None where undefined."""
    agg = depgraph.aggregate_attention(out.attention, top_layer_fraction)
    es = depgraph.symmetrize_scores(agg, out.positions)
    _, adj, true_deg = oracle.ground_truth_subgraph(out.positions)
    iu = np.triu_indices(es.n, 1)
    scores, labels = es.scores[iu], adj[iu]
    auc = ratio = None
    if labels.any() and not labels.all():
        auc = roc_auc(scores, labels)
        if scores[~labels].mean() > 0:
            ratio = edge_ratio(scores, labels)
    score_ovr = ovr(es.scores.sum(axis=1), true_deg) if es.n >= 2 else None
    return auc, ratio, score_ovr


def _eval_path(args):
    denoiser, seed, path, max_step, frac = args
    rng = np.random.default_rng([seed, path])
    state = SequenceState.fully_masked(SEQ_LEN)
    rows = []
    for _ in range(max_step):
        out = denoiser(state)
        rows.append(step_metrics(out, frac))
        k = int(rng.integers(len(out.positions)))
        pos = int(out.positions[k])
        p = np.asarray(out.marginals[k], dtype=np.float64)
        state.tokens[pos] = int(rng.choice(p.size, p=p / p.sum()))
    return rows


def _summ(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, 0
    return float(np.mean(vals)), float(np.std(vals)), len(vals)


def eval_graph_run(denoiser, paths=100, seed=0, max_step=EVAL_STEPS, top_layer_fraction=0.25,
                   workers=1, model_seeds=()):
    """Attention-vs-ground-truth metrics along random-order sampling paths.

    Each path unmasks one uniformly random position per step, sampling its
    value from the denoiser's marginal.  Metrics are taken on the state
    before each of the first ``max_step`` unmaskings.
    """
    if paths < 1:
        raise ValueError("paths must be >= 1")
    jobs = [(denoiser, seed, p, max_step, top_layer_fraction) for p in range(paths)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_eval_path, jobs))
    else:
        results = [_eval_path(j) for j in jobs]
    return _report(results, paths, list(model_seeds))


def _report(results, paths, seeds):
    per_step = []
    pooled = {"auc": [], "ratio": [], "ovr": []}
    for s in range(len(results[0])):
        auc, ratio, o = zip(*(r[s] for r in results))
        a = _summ(auc)
        r = _summ(ratio)
        v = _summ(o)
        for key, vals in (("auc", auc), ("ratio", ratio), ("ovr", o)):
            pooled[key] += [x for x in vals if x is not None]
        per_step.append({
            "step": s + 1,
            "auc": a[0], "auc_std": a[1],
            "edge_nonedge_ratio": r[0], "ratio_std": r[1],
            "ovr": v[0], "ovr_std": v[1],
            "counts": {"auc": a[2], "ratio": r[2], "ovr": v[2]},
        })
    return GraphEvalReport(per_step=per_step, overall=_overall(per_step, pooled), paths=paths,
                           seeds=seeds)


def _overall(per_step, pooled):
    def step_mean(key):
        vals = [row[key] for row in per_step if row[key] is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "auc": step_mean("auc"),
        "edge_nonedge_ratio": step_mean("edge_nonedge_ratio"),
        "ovr": step_mean("ovr"),
        "pooled": {k: (float(np.mean(v)) if v else None) for k, v in pooled.items()},
    }


def combine_reports(reports):
    """Average per-step and overall means across independently trained models."""
    per_step = []
    for rows in zip(*(r.per_step for r in reports)):
        merged = {"step": rows[0]["step"]}
        for key, std in (("auc", "auc_std"), ("edge_nonedge_ratio", "ratio_std"), ("ovr", "ovr_std")):
            vals = [row[key] for row in rows if row[key] is not None]
            merged[key] = float(np.mean(vals)) if vals else None
            merged[std] = float(np.std(vals)) if vals else None
        merged["counts"] = {k: sum(row["counts"][k] for row in rows) for k in ("auc", "ratio", "ovr")}
        per_step.append(merged)
    pooled = {
        k: float(np.mean([r.overall["pooled"][k] for r in reports])) for k in ("auc", "ratio", "ovr")
    }
    seeds = [s for r in reports for s in r.seeds]
    return GraphEvalReport(per_step=per_step, overall=_overall(per_step, {}) | {"pooled": pooled},
                           paths=sum(r.paths for r in reports), seeds=seeds)


# --------------------------------------------------------------------------
# strategy comparison


@dataclass
class CompareReport:
    strategies: dict

    def to_json(self):
        return {"strategies": self.strategies}

    def write(self, json_path, csv_path):
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy", "mean_nfe", "validity_rate", "tv_distance",
                        "mean_peak_segments", "segment_trajectory"])
            for name, row in self.strategies.items():
                w.writerow([name, row["mean_nfe"], row["validity_rate"], row["tv_distance"],
                            row["mean_peak_segments"],
                            " ".join(f"{x:.4f}" for x in row["segment_trajectory"])])


def decode_seed(seed, i):
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def run_decodes(denoiser, strategy, samples, seed, gen_len=SEQ_LEN):
    """``samples`` independent decodes from fully masked; returns traces."""
    traces = []
    for i in range(samples):
        _, trace = decode(denoiser, strategy, SequenceState.fully_masked(gen_len),
                          decode_seed(seed, i))
        traces.append(trace)
    return traces


def summarize_traces(traces, with_tv=False):
    finals = np.array([t.final_tokens for t in traces])
    trajs = [t.segment_trajectory() for t in traces]
    width = max(len(t) for t in trajs)
    padded = np.array([t + [t[-1]] * (width - len(t)) for t in trajs], dtype=np.float64)
    return {
        "samples": len(traces),
        "mean_nfe": float(np.mean([t.nfe for t in traces])),
        "validity_rate": validity_rate(finals),
        "tv_distance": tv_distance(finals) if with_tv else None,
        "mean_peak_segments": float(np.mean([max(t) for t in trajs])),
        "segment_trajectory": padded.mean(axis=0).tolist(),
    }


def compare_strategies(denoiser, strategies, samples, seed, oracle_run=False):
    """Decode ``samples`` sequences per named StrategyConfig."""
    rows = {}
    for name, cfg in strategies.items():
        traces = run_decodes(denoiser, cfg, samples, seed)
        rows[name] = summarize_traces(traces, with_tv=oracle_run and cfg.committer == "sample")
    return CompareReport(strategies=rows)


def named_strategy(name, **overrides):
    """StrategyConfig for a CLI strategy name; ``fullparallel`` is top-k, k=9."""
    if name == "fullparallel":
        return StrategyConfig(kind="topk", **(overrides | {"k": SEQ_LEN}))
    return StrategyConfig(kind=name, **overrides)
