"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 training divergence, 4 checkpoint
mismatch, 5 oracle zero support.
"""
import argparse
import csv
import logging
import sys

from . import metrics, oracle
from .decode import STRATEGIES, SequenceState, decode, write_traces
from .depgraph import TauSchedule
from .toymdm import checkpoint as ckpt_io
from .toymdm.data import (
    LABELS,
    SEQ_LEN,
    gen_dataset,
    is_valid,
    load_dataset,
    save_dataset,
)
from .toymdm.denoiser import ToyDenoiser
from .toymdm.model import ModelConfig
from .toymdm.train import TrainConfig, TrainingDiverged, train

log = logging.getLogger("dapd")

EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_CKPT, EXIT_ZERO_SUPPORT = 1, 2, 3, 4, 5
CLI_STRATEGIES = STRATEGIES + ("fullparallel",)

# CPU-sized toy defaults; layer count, steps and lr follow the reference setup
DEFAULT_DIM = 64
DEFAULT_BATCH = 128


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _strategy_flags(p):
    p.add_argument("--k", type=int, default=2, help="positions per step for topk")
    p.add_argument("--conf-thresh", type=float, default=0.9, help="confidence cutoff (conf_threshold, kl_stability, dapd late phase)")
    p.add_argument("--kl-thresh", type=float, default=0.001, help="stability cutoff for kl_stability")
    p.add_argument("--tau-min", type=float, default=0.01, help="edge threshold at the first step")
    p.add_argument("--tau-max", type=float, default=0.05, help="edge threshold at full progress")
    p.add_argument("--switch-mask-ratio", type=float, default=0.5,
                   help="dapd uses the graph while this fraction or more is still masked")
    p.add_argument("--top-layer-fraction", type=float, default=0.25,
                   help="share of final layers whose attention is averaged")
    p.add_argument("--committer", choices=("argmax", "sample"), default="argmax",
                   help="how tokens are committed from marginals")


def _source_flags(p, many=False):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--ckpt", help="comma-separated checkpoints, results averaged" if many
                     else "trained checkpoint")
    src.add_argument("--oracle", action="store_true", help="use the exact oracle denoiser")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="dapd", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--config", help="flat key=value file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, default=50000, help="number of sequences")
    p.add_argument("--seed", type=int, required=True, help="dataset seed")
    p.add_argument("--out", required=True, help="output text file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a toy denoiser", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset written by gen-data")
    p.add_argument("--seed", type=int, required=True, help="init and batching seed")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training-log CSV (default: <out>.log.csv)")
    p.add_argument("--steps", type=int, default=20000, help="gradient steps")
    p.add_argument("--lr", type=float, default=1e-3, help="AdamW learning rate")
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH, help="sequences per step")
    p.add_argument("--weight-decay", type=float, default=0.01, help="decoupled decay on matrices")
    p.add_argument("--grad-clip", type=float, default=1.0, help="global grad-norm cap; 0 disables")
    p.add_argument("--t-min", type=float, default=1e-3, help="noise levels are drawn from (t_min, 1]")
    p.add_argument("--layers", type=int, default=8, help="transformer blocks")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM, help="model width")
    p.add_argument("--abs-pos", choices=["none", "learned", "sinusoidal"], default="none",
                   help="absolute position embedding added to the input")
    p.add_argument("--rope", action=argparse.BooleanOptionalAction, default=True,
                   help="rotary position encoding in attention")
    p.add_argument("--log-every", type=int, default=50, help="steps between log rows")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-graph", help="attention vs ground-truth graph metrics",
                       formatter_class=fmt)
    _source_flags(p, many=True)
    p.add_argument("--paths", type=int, default=100, help="random sampling paths")
    p.add_argument("--seed", type=int, default=0, help="path seed")
    p.add_argument("--top-layer-fraction", type=float, default=0.25,
                   help="share of final layers whose attention is averaged")
    p.add_argument("--workers", type=int, default=1, help="processes for path fan-out")
    p.add_argument("--out", required=True, help="report prefix; writes <out>.json and <out>.csv")
    p.set_defaults(func=cmd_eval_graph)

    p = sub.add_parser("decode", help="decode sequences and dump traces", formatter_class=fmt)
    _source_flags(p)
    p.add_argument("--strategy", default="dapd", help=f"one of {', '.join(CLI_STRATEGIES)}")
    p.add_argument("--samples", type=int, default=1, help="sequences to decode")
    p.add_argument("--seed", type=int, default=0, help="base seed for per-decode seeds")
    _strategy_flags(p)
    p.add_argument("--out", required=True, help="line-delimited JSON traces")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("compare", help="compare decoding strategies", formatter_class=fmt)
    _source_flags(p)
    p.add_argument("--strategies", default="sequential,topk,conf_threshold,kl_stability,dapd",
                   help="comma-separated strategy names")
    p.add_argument("--samples", type=int, default=1000, help="decodes per strategy")
    p.add_argument("--seed", type=int, default=0, help="base seed for per-decode seeds")
    _strategy_flags(p)
    p.add_argument("--out", required=True, help="report prefix; writes <out>.json and <out>.csv")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("oracle", help="exact marginals, MI and ground-truth graph",
                       formatter_class=fmt)
    p.add_argument("--mode", choices=("marginals", "mi", "graph"), default="marginals",
                   help="table to write")
    p.add_argument("--observe", default="", help="comma-separated POS=VAL, e.g. X1=0,Y2=1")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_oracle)
    return parser


# --------------------------------------------------------------------------


def read_config(path):
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = read_config(known.config)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    for action in parser._subparsers._group_actions[0].choices.values():
        dests = {a.dest: a for a in action._actions}
        for key, value in values.items():
            if key not in dests:
                continue
            if isinstance(dests[key], (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
                value = value.lower() in ("1", "true", "yes", "on")
            dests[key].required = False
            action.set_defaults(**{key: value})


def _denoiser(args):
    if args.oracle:
        return oracle.OracleDenoiser()
    if not args.ckpt:
        raise UsageError("one of --ckpt or --oracle is required")
    return ToyDenoiser(ckpt_io.load(args.ckpt))


def _strategy(args, name):
    if name not in CLI_STRATEGIES:
        raise UsageError(f"unknown strategy {name!r}; valid: {', '.join(CLI_STRATEGIES)}")
    kw = dict(
        k=args.k,
        conf_thresh=args.conf_thresh,
        kl_thresh=args.kl_thresh,
        tau_schedule=TauSchedule(args.tau_min, args.tau_max),
        switch_mask_ratio=args.switch_mask_ratio,
        committer=args.committer,
        top_layer_fraction=args.top_layer_fraction,
    )
    try:
        return metrics.named_strategy(name, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_gen_data(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    data = gen_dataset(args.n, args.seed)
    save_dataset(args.out, data)
    valid = int(is_valid(data).sum())
    print(f"wrote {len(data)} sequences to {args.out} ({valid}/{len(data)} valid)")


def cmd_train(args):
    try:
        data = load_dataset(args.data)
    except ValueError as exc:
        raise OSError(f"malformed dataset: {exc}") from exc
    try:
        mcfg = ModelConfig(num_layers=args.layers, num_heads=args.heads, model_dim=args.dim,
                           abs_pos=args.abs_pos, rope=args.rope)
        tcfg = TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size,
                           weight_decay=args.weight_decay, grad_clip=args.grad_clip,
                           t_min=args.t_min, seed=args.seed, log_every=args.log_every)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = []
    ck = train(data, mcfg, tcfg, log_rows=rows,
               progress=lambda s, loss: log.info("step %d loss %.4f", s, loss))
    ckpt_io.save(ck, args.out)
    log_path = args.log or args.out + ".log.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(rows)
    print(f"wrote {args.out} (final loss {ck.train_meta['final_loss']:.4f}) and {log_path}")


def cmd_eval_graph(args):
    if args.oracle or not args.ckpt:
        dens = [_denoiser(args)]
    else:
        dens = [ToyDenoiser(ckpt_io.load(path)) for path in args.ckpt.split(",") if path]
    reports = []
    for den in dens:
        seeds = [] if args.oracle else [den.ckpt.train_meta.get("seed")]
        reports.append(metrics.eval_graph_run(den, paths=args.paths, seed=args.seed,
                                              top_layer_fraction=args.top_layer_fraction,
                                              workers=args.workers, model_seeds=seeds))
    report = reports[0] if len(reports) == 1 else metrics.combine_reports(reports)
    report.write(args.out + ".json", args.out + ".csv")
    o = report.overall
    print(f"auc={o['auc']} ratio={o['edge_nonedge_ratio']} ovr={o['ovr']} -> {args.out}.json")


def cmd_decode(args):
    den = _denoiser(args)
    strat = _strategy(args, args.strategy)
    records = []
    for i in range(args.samples):
        seed = metrics.decode_seed(args.seed, i)
        _, trace = decode(den, strat, SequenceState.fully_masked(SEQ_LEN), seed)
        records.append((seed, args.strategy, trace))
    write_traces(args.out, records)
    print(f"wrote {len(records)} traces to {args.out}")


def cmd_compare(args):
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]
    strategies = {name: _strategy(args, name) for name in names}
    den = _denoiser(args)
    report = metrics.compare_strategies(den, strategies, args.samples, args.seed,
                                        oracle_run=args.oracle)
    report.write(args.out + ".json", args.out + ".csv")
    for name, row in report.strategies.items():
        print(f"{name}: nfe={row['mean_nfe']:.3f} validity={row['validity_rate']:.4f}")


def cmd_oracle(args):
    try:
        observed = oracle.parse_observation(args.observe)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    masked = [i for i in range(SEQ_LEN) if i not in observed]
    if args.mode == "marginals":
        marg = oracle.oracle_marginals(observed, masked)
        header = ["position", "p0", "p1", "p2"]
        rows = [[LABELS[p], *(f"{v:.12g}" for v in row)] for p, row in zip(masked, marg)]
    elif args.mode == "mi":
        positions, mat = oracle.mi_matrix(observed)
        header = ["position", *(LABELS[p] for p in positions)]
        rows = [[LABELS[p], *(f"{v:.12g}" for v in row)] for p, row in zip(positions, mat)]
    else:
        if not oracle.enumerate_consistent(observed).size:
            raise oracle.ZeroSupportError("zero support")
        positions, adj, deg = oracle.ground_truth_subgraph(masked)
        header = ["position", "degree", *(LABELS[p] for p in positions)]
        rows = [[LABELS[p], int(d), *(int(x) for x in row)]
                for p, d, row in zip(positions, deg, adj)]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {args.mode} table ({len(rows)} rows) to {args.out}")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"dapd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"dapd: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ckpt_io.CheckpointError as exc:
        print(f"dapd: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    except oracle.ZeroSupportError as exc:
        print(f"dapd: {exc}", file=sys.stderr)
        return EXIT_ZERO_SUPPORT
    except OSError as exc:
        print(f"dapd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
