"""End-to-end acceptance checks; each test records one PASS/FAIL line.

Trained checkpoints are cached under ``artifacts/`` at the repository root
and built through the CLI on first use (about 35-40 minutes per seed on one
CPU core).  Delete the directory to retrain from scratch.
"""
import math
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from dapd import metrics
from dapd.cli import main as cli_main
from dapd.decode import StrategyConfig
from dapd.depgraph import EdgeScoreMatrix, build_graph, welsh_powell_select
from dapd.oracle import SUPPORT, OracleDenoiser
from dapd.toymdm import ToyDenoiser, load
from dapd.toymdm import model as M
from dapd.toymdm.checkpoint import Checkpoint
from dapd.toymdm.data import LABELS, gen_dataset, sample_mask
from dapd.toymdm.denoiser import forward
from dapd.toymdm.train import mdm_loss

ARTIFACTS = Path(__file__).resolve().parents[1] / "artifacts"
MODEL_SEEDS = (1, 2, 3)

# thresholds
AUC_MIN, RATIO_MIN, OVR_MAX = 0.85, 1.5, 0.10
STEP1_OVR_MAX = 0.02
FULLPAR_BAND = (0.0083, 0.0163)
TV_MAX = 0.05
VALIDITY_GAP = 0.05
FD_REL = 1e-4


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])


def checkpoint_for(seed):
    ckpt = ARTIFACTS / f"seed{seed}.bin"
    if not ckpt.exists():
        ARTIFACTS.mkdir(exist_ok=True)
        data = ARTIFACTS / f"data_seed{seed}.txt"
        assert cli_main(["gen-data", "--n", "50000", "--seed", str(seed), "--out", str(data)]) == 0
        assert cli_main(["train", "--data", str(data), "--seed", str(seed), "--out", str(ckpt)]) == 0
    return load(ckpt)


@pytest.fixture(scope="module")
def trained():
    return {s: checkpoint_for(s) for s in MODEL_SEEDS}


@pytest.fixture(scope="module")
def graph_reports(trained):
    reports = {}
    for seed, ck in trained.items():
        rep = metrics.eval_graph_run(ToyDenoiser(ck), paths=100, seed=0, model_seeds=[seed])
        rep.write(ARTIFACTS / f"eval_seed{seed}.json", ARTIFACTS / f"eval_seed{seed}.csv")
        reports[seed] = rep
    return reports


def fmt(x):
    return "n/a" if x is None else f"{x:.3f}"


def test_criterion_1_attention_recovers_graph(trained, graph_reports):
    combined = metrics.combine_reports(list(graph_reports.values()))
    o = combined.overall
    per_seed = ", ".join(
        f"s{s}=({fmt(r.overall['auc'])}, {fmt(r.overall['edge_nonedge_ratio'])}, {fmt(r.overall['ovr'])})"
        for s, r in graph_reports.items()
    )
    steps = {s: ck.train_meta.get("steps") for s, ck in trained.items()}
    ok = (
        all(v == 20000 for v in steps.values())
        and all(ck.config.num_layers == 8 for ck in trained.values())
        and o["auc"] is not None and o["auc"] >= AUC_MIN
        and o["edge_nonedge_ratio"] is not None and o["edge_nonedge_ratio"] >= RATIO_MIN
        and o["ovr"] is not None and o["ovr"] <= OVR_MAX
    )
    record(1, ok, f"mean over seeds auc={fmt(o['auc'])} (>= {AUC_MIN}) "
                  f"ratio={fmt(o['edge_nonedge_ratio'])} (>= {RATIO_MIN}) ovr={fmt(o['ovr'])} "
                  f"(<= {OVR_MAX}); per seed (auc, ratio, ovr): {per_seed}")
    assert ok


def test_criterion_2_per_step_table_shape(graph_reports):
    details, ok = [], True
    for seed, rep in graph_reports.items():
        steps = [row["step"] for row in rep.per_step]
        step1 = rep.per_step[0]["ovr"]
        ok &= steps == list(range(1, 8)) and step1 is not None and step1 <= STEP1_OVR_MAX
        details.append(f"s{seed}: steps={steps[0]}..{steps[-1]} step1_ovr={fmt(step1)}")
    record(2, ok, f"per-step rows exactly 1..7, step-1 OVR <= {STEP1_OVR_MAX}; " + "; ".join(details))
    assert ok


def test_criterion_3_full_parallel_mismatch():
    cfg = metrics.named_strategy("fullparallel", committer="sample")
    row = metrics.compare_strategies(OracleDenoiser(), {"fp": cfg}, 20000, seed=0).strategies["fp"]
    lo, hi = FULLPAR_BAND
    ok = lo <= row["validity_rate"] <= hi and row["mean_nfe"] == 1.0
    record(3, ok, f"full-parallel oracle validity={row['validity_rate']:.5f} in [{lo}, {hi}] "
                  f"(exact 1/81={1 / 81:.5f}), nfe={row['mean_nfe']}")
    assert ok


def test_criterion_4_chain_rule_exactness():
    n = 10000
    cfg = StrategyConfig(kind="random", committer="sample")
    row = metrics.summarize_traces(metrics.run_decodes(OracleDenoiser(), cfg, n, seed=0), with_tv=True)
    # reference: TV of an exact uniform sampler at the same sample size
    floor = [metrics.tv_distance(SUPPORT[np.random.default_rng(s).integers(0, 243, n)]) for s in range(200)]
    lo, hi = np.quantile(floor, [0.005, 0.995])
    ok = row["validity_rate"] == 1.0 and row["tv_distance"] <= TV_MAX
    record(4, ok, f"random-order oracle validity={row['validity_rate']} (== 1.0) "
                  f"tv={row['tv_distance']:.4f} (<= {TV_MAX}); an exact sampler at n={n} gives "
                  f"tv in [{lo:.4f}, {hi:.4f}] (99% band, mean {np.mean(floor):.4f})")
    assert ok


def test_criterion_5_dapd_oracle_trace():
    expected = [["X2", "X4"], ["X1", "X3", "X5"], ["Y1", "Y2", "Y3", "Y4"]]
    cfg = StrategyConfig(kind="dapd", committer="sample")
    traces = metrics.run_decodes(OracleDenoiser(), cfg, 2000, seed=0)
    sets_ok = all([[LABELS[p] for p in s.unmasked] for s in t.steps] == expected for t in traces)
    summary = metrics.summarize_traces(traces)
    ok = sets_ok and summary["mean_nfe"] == 3.0 and summary["validity_rate"] == 1.0
    record(5, ok, f"oracle dapd nfe={summary['mean_nfe']} sets_match={sets_ok} "
                  f"validity={summary['validity_rate']} over 2000 decodes")
    assert ok


def test_criterion_6_trained_speedup(trained):
    details, ok = [], True
    for seed, ck in trained.items():
        den = ToyDenoiser(ck)
        rows = metrics.compare_strategies(
            den,
            {
                "sequential": StrategyConfig(kind="sequential", committer="sample"),
                "dapd": StrategyConfig(kind="dapd", committer="sample"),
            },
            1000,
            seed=seed,
        ).strategies
        d, s = rows["dapd"], rows["sequential"]
        gap = abs(d["validity_rate"] - s["validity_rate"])
        ok &= d["mean_nfe"] < 9 and gap <= VALIDITY_GAP
        details.append(f"s{seed}: dapd nfe={d['mean_nfe']:.2f} val={d['validity_rate']:.3f} "
                       f"seq nfe={s['mean_nfe']:.2f} val={s['validity_rate']:.3f}")
    record(6, ok, f"dapd nfe < 9 and |validity gap| <= {VALIDITY_GAP}; " + "; ".join(details))
    assert ok


def test_criterion_7_segment_dispersion():
    den = OracleDenoiser()
    peaks = {}
    for name in ("dapd", "sequential", "conf_threshold"):
        cfg = StrategyConfig(kind=name, committer="sample")
        peaks[name] = metrics.summarize_traces(metrics.run_decodes(den, cfg, 100, seed=0))
    d = peaks["dapd"]["mean_peak_segments"]
    s = peaks["sequential"]["mean_peak_segments"]
    c = peaks["conf_threshold"]["mean_peak_segments"]
    ok = d > s and d > c
    traj = " ".join(f"{x:.0f}" for x in peaks["sequential"]["segment_trajectory"])
    record(7, ok, f"mean peak segments dapd={d:.2f} sequential={s:.2f} conf_threshold={c:.2f} "
                  f"over 100 seeds (need dapd strictly larger); sequential trajectory {traj}")
    assert ok


def _fd_worst():
    cfg = M.ModelConfig(num_layers=2, num_heads=2, model_dim=16)
    rng = np.random.default_rng(0)
    params = M.init_params(cfg, rng, dtype=np.float64)
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    x0 = gen_dataset(8, 1)
    t = rng.uniform(0.2, 1, 8)
    mask = sample_mask(t, rng)
    _, grads = mdm_loss(params, cfg, x0, t=t, mask=mask, grad=True)
    worst = 0.0
    for name in params:
        flat = params[name].ravel()
        for i in rng.choice(flat.size, min(8, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-5
            lp = mdm_loss(params, cfg, x0, t=t, mask=mask)
            flat[i] = old - 1e-5
            lm = mdm_loss(params, cfg, x0, t=t, mask=mask)
            flat[i] = old
            fd = (lp - lm) / 2e-5
            an = grads[name].ravel()[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-5))
    return worst


def _normalization_worst():
    cfg = M.ModelConfig(num_layers=8, num_heads=4, model_dim=32)
    rng = np.random.default_rng(1)
    ck = Checkpoint(cfg, M.init_params(cfg, rng))
    worst = 0.0
    for _ in range(1000):
        tokens = SUPPORT[rng.integers(243)].copy()
        tokens[rng.random(9) < rng.random()] = -1
        probs, attn = forward(ck, tokens[None])
        if np.any(probs < 0) or any(np.any(a < 0) for a in attn):
            return math.inf
        worst = max(worst, np.abs(probs.sum(-1) - 1).max(), *(np.abs(a.sum(-1) - 1).max() for a in attn))
    return worst


def _wp_failures():
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(10000):
        n = int(rng.integers(1, 33))
        upper = np.triu(rng.random((n, n)) < rng.random(), 1)
        adj = upper | upper.T
        g = build_graph(EdgeScoreMatrix(tuple(range(n)), adj.astype(float)), 0.5)
        chosen = welsh_powell_select(g, rng.random(n))
        sel = np.zeros(n, dtype=bool)
        sel[chosen] = True
        independent = not adj[np.ix_(sel, sel)].any()
        maximal = all(adj[v, sel].any() for v in np.flatnonzero(~sel))
        bad += not (independent and maximal)
    return bad


def _monotone_failures():
    rng = np.random.default_rng(3)
    bad = 0
    transforms = (np.exp, np.arctan, lambda x: x**3 + x, lambda x: 2 * x + 7)
    for i in range(1000):
        n = int(rng.integers(3, 40))
        s = rng.normal(size=n)
        labels = rng.random(n) < 0.3
        labels[:2] = True, False
        deg = rng.integers(0, 5, n)
        f = transforms[i % len(transforms)]
        bad += not math.isclose(metrics.roc_auc(f(s), labels), metrics.roc_auc(s, labels), abs_tol=1e-12)
        bad += metrics.ovr(f(s), deg) != metrics.ovr(s, deg)
    return bad


def test_criterion_8_numerical_suite():
    fd = _fd_worst()
    norm = _normalization_worst()
    wp = _wp_failures()
    mono = _monotone_failures()
    ok = fd < FD_REL and norm <= 1e-5 and wp == 0 and mono == 0
    record(8, ok, f"fd rel err={fd:.2e} (< {FD_REL}); normalization max dev={norm:.1e} over 1000 "
                  f"forwards; wp failures={wp}/10000; monotone-invariance failures={mono}/1000")
    assert ok
