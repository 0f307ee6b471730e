"""Command line entry point: ``glasu <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, GlasuError
from ..federation import evaluate
from ..graph import Dataset, load_dataset, partition_dataset, save_dataset
from ..model import load_checkpoint
from ..sampling import LabelMode, LayerPlan, count_sync_messages
from ..theory import BoundInputs, SmoothnessConstants, report as bound_report
from ..transport import expected_counts
from .config import FIELDS, PRESETS, ExperimentConfig, load_config, with_overrides
from .experiment import apply_preset, build_partition, preset_of, run_experiment
from .fixtures import make_sbm_fixture
from .planetoid import convert_planetoid

log = logging.getLogger("glasu")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are configuration errors
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(ConfigError.exit_code)


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_experiment_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="JSON experiment configuration; flags override its keys")
    p.add_argument("--dataset-path", dest="dataset_path")
    p.add_argument("--M", type=int)
    p.add_argument("--edge-keep-prob", dest="edge_keep_prob", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--agg-layers", dest="agg_layers", type=_int_list)
    p.add_argument("--K", type=int)
    p.add_argument("--backbone", choices=("gcn", "gcnii"))
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--agg-kind", dest="agg_kind", choices=("average", "concat"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--fanout", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--Q", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--label-mode", dest="label_mode", choices=("all", "single"))
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--transport", choices=("inproc", "tcp"))
    p.add_argument("--port", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)


def _experiment_config(args) -> ExperimentConfig:
    base = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {k: getattr(args, k) for k in FIELDS if hasattr(args, k)}
    cfg = with_overrides(base, overrides)
    if not cfg.dataset_path:
        raise ConfigError("dataset_path is required (flag --dataset-path or config key)")
    if cfg.seed is None:
        raise ConfigError("seed is required")
    return cfg


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg, args.out)
    print(f"train_accuracy={report.train_accuracy:.4f}")
    print(f"val_accuracy={report.val_accuracy:.4f}")
    print(f"test_accuracy={report.test_accuracy:.4f}")
    print(f"messages={report.ledger.get('total_messages', 0)}")
    print(f"bytes={report.ledger.get('total_bytes', 0)}")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    cfg = apply_preset(preset_of(_experiment_config(args)), _experiment_config(args)).validate()
    if cfg.preset == "standalone":
        raise ConfigError("standalone checkpoints are evaluated per client; use train's report")
    ds = load_dataset(cfg.dataset_path)
    part = build_partition(cfg, ds)
    ckpt = Path(args.checkpoints)
    models = [load_checkpoint(ckpt / f"client{m}.glsw", cfg.kind()) for m in range(part.M)]
    nodes = {"train": ds.train, "val": ds.val, "test": ds.test}[args.split]
    acc = evaluate(models, part, cfg.plan(), cfg.agg(), nodes, LabelMode(cfg.label_mode))
    print(f"{args.split}_accuracy={acc:.4f}")
    return 0


def cmd_partition(args) -> int:
    ds = load_dataset(args.dataset_path)
    part = partition_dataset(ds, args.M, args.edge_keep_prob, args.seed)
    for m, shard in enumerate(part.shards):
        print(f"client {m}: columns {shard.col_offset}..{shard.col_offset + shard.width - 1}, "
              f"{shard.graph.num_edges} of {ds.graph.num_edges} edges")
        if args.out:
            save_dataset(Dataset(shard.graph, shard.features, ds.labels, ds.train, ds.val, ds.test,
                                 ds.num_classes), Path(args.out) / f"client{m}")
    return 0


def cmd_fixture(args) -> int:
    ds = make_sbm_fixture(args.blocks, args.nodes_per_block, args.p_in, args.p_out, args.dim,
                          args.seed, args.out)
    print(f"wrote {ds.num_nodes} nodes, {ds.graph.num_edges} edges to {args.out}")
    return 0


def cmd_convert(args) -> int:
    ds = convert_planetoid(args.raw_dir, args.name, args.out, normalize=not args.no_normalize)
    print(f"wrote {ds.num_nodes} nodes, {ds.graph.num_edges} edges, {ds.num_classes} classes to {args.out}")
    return 0


def cmd_bound(args) -> int:
    k = SmoothnessConstants(args.G_ell, args.L_ell, args.G_f, args.L_f)
    inputs = BoundInputs(args.M, args.Q, args.T, args.S, args.d, args.delta, args.delta_L, args.eta)
    for key, value in bound_report(k, inputs).items():
        print(f"{key}={value}")
    return 0


def cmd_count_comm(args) -> int:
    plan = LayerPlan(args.layers, tuple(args.agg_layers)) if args.agg_layers else \
        LayerPlan.uniform(args.layers, args.K if args.K else args.layers)
    mode = LabelMode(args.label_mode)
    plan.check_label_mode(mode)
    counts = expected_counts(plan, args.M, args.T, args.Q, mode)
    print(f"agg_layers={','.join(map(str, plan.agg_layers))}")
    print(f"sync_messages_per_round={count_sync_messages(plan, args.M)}")
    for variant, n in sorted(counts.items()):
        print(f"{variant}={n}")
    print(f"total={sum(counts.values())}")
    agg = counts["ReprUpload"] + counts["ReprBroadcast"]
    print(f"aggregation_messages_per_update={agg / (args.T * args.Q):g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glasu", description="Vertical federated GNN training with lazy aggregation "
                                               "and stale updates.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run an experiment and write CSVs, checkpoints and a report")
    _add_experiment_flags(p, seed_required=True)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved checkpoints")
    _add_experiment_flags(p, seed_required=False)
    p.add_argument("--checkpoints", required=True, help="directory holding client<m>.glsw")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("partition", help="split a dataset across clients and report the shards")
    p.add_argument("--dataset-path", dest="dataset_path", required=True)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--edge-keep-prob", dest="edge_keep_prob", type=float, default=0.8)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="write one dataset directory per client")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("fixture", help="generate a stochastic-block-model dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--nodes-per-block", dest="nodes_per_block", type=int, default=20)
    p.add_argument("--p-in", dest="p_in", type=float, default=0.5)
    p.add_argument("--p-out", dest="p_out", type=float, default=0.05)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("convert-planetoid", help="convert raw Planetoid files to a dataset directory")
    p.add_argument("--raw-dir", dest="raw_dir", required=True)
    p.add_argument("--name", default="cora")
    p.add_argument("--out", required=True)
    p.add_argument("--no-normalize", dest="no_normalize", action="store_true")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("bound", help="evaluate the convergence bound for given constants")
    for name in ("G_ell", "L_ell", "G_f", "L_f"):
        p.add_argument(f"--{name}", type=float, required=True)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--Q", type=int, default=1)
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--S", type=int, default=16)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--delta-L", dest="delta_L", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=0.0)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("count-comm", help="expected message counts for a configuration")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--agg-layers", dest="agg_layers", type=_int_list)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--T", type=int, default=1)
    p.add_argument("--Q", type=int, default=1)
    p.add_argument("--label-mode", dest="label_mode", choices=("all", "single"), default="all")
    p.set_defaults(func=cmd_count_comm)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GlasuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
