"""
Command line front-end: synth, train, eval, gradcheck, bench and scan

Results are printed on stdout as `key=value` lines, errors on stderr with a non zero exit status.
"""
import dataclasses
import sys
from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd
from omegaconf import OmegaConf

# Project Imports
from hgmamba.common.errors import ConfigError, HGMambaError
from hgmamba.common.io import format_report, write_curve, write_report
from hgmamba.dataset.dataset import BagDataset, find_bag
from hgmamba.dataset.synthetic import SynthConfig, generate_dataset
from hgmamba.eval.cost_model import bench, format_bytes, growth_ratio
from hgmamba.eval.gradcheck import GRADCHECK_SIZES, run_gradcheck
from hgmamba.graph.scanner import build_scan_set
from hgmamba.models.hgmamba import ModelConfig, build_structure, validate_model_config
from hgmamba.training.config import ExperimentConfig, load_config, resolve_key
from hgmamba.training.trainer import CONFIG_FILE, Trainer, evaluate, load_params, scan_rng

HGMAMBA_CURVE = "hgmamba_curve.tsv"
ATTENTION_CURVE = "attention_curve.tsv"
BENCH_TABLE = "bench_table.txt"
SWEEP_REPORT = "sweep_report.tsv"


def _print_values(values: dict):
    sys.stdout.write(format_report(values))


def _int_list(value: str) -> List[int]:
    return [int(v) for v in value.split(",") if v.strip()]


def _grid(value: str):
    rows, cols = value.lower().split("x")
    return int(rows), int(cols)


# ----------------------------------------------------------------------------------------------------------------------
# Subcommands
def cmd_synth(args: Namespace) -> int:
    rows, cols = _grid(args.grid)
    cfg = SynthConfig(grid_rows=rows, grid_cols=cols, d=args.dim, n_classes=args.classes,
                      motif_strength=args.motif, high_order=args.high_order, seed=args.seed)
    splits = tuple(_int_list(args.splits)) if args.splits else None
    if splits is not None and len(splits) != 3:
        raise ConfigError("--splits expects three counts: train,val,test")
    manifest = generate_dataset(cfg, args.out, args.bags, splits)
    counts = manifest["split"].value_counts()
    _print_values({"out": args.out, "bags": len(manifest),
                   **{f"n_{split}": int(counts.get(split, 0)) for split in ("train", "val", "test")}})
    return 0


def _train_once(config: ExperimentConfig, data_dir: str, out_dir: Path, resume: bool = False) -> dict:
    trainer = Trainer(config.model, config.train, data_dir, out_dir)
    trainer.init()
    if resume:
        trainer.resume()
    trainer.train()
    values = {"out": str(out_dir), "epochs": trainer.num_epochs, "steps": trainer.num_steps,
              "best_epoch": trainer.best_epoch, "best_val_score": trainer.best_score}
    test = BagDataset(data_dir, "test")
    if len(test) > 0:
        metrics = evaluate(test, trainer.best_params, trainer.model_config, config.train.eval_seed)
        values.update({f"test_{k}": v for k, v in metrics.as_dict().items() if not k.startswith("confusion")})
    return values


def cmd_train(args: Namespace) -> int:
    overrides = list(args.set or [])
    config = load_config(args.config, overrides)
    out_dir = Path(args.out)
    if not args.sweep:
        _print_values(_train_once(config, args.data, out_dir, args.resume))
        return 0

    # Ablation harness: one sub directory per value
    key, values = args.sweep.split("=", 1)
    dotted_key = resolve_key(key)
    rows = []
    for value in values.split(","):
        run_config = load_config(args.config, overrides + [f"{dotted_key}={value}"])
        result = _train_once(run_config, args.data, out_dir / f"{dotted_key}={value}", args.resume)
        rows.append({"key": dotted_key, "value": value, **result})
        _print_values(rows[-1])
    out_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out_dir / SWEEP_REPORT, sep="\t", index=False, lineterminator="\n")
    return 0


def _model_config_for(checkpoint: Path, config_path: Optional[str]) -> ModelConfig:
    """The model configuration of a checkpoint: the given file, or the config.yaml of the training run"""
    if config_path is not None:
        return load_config(config_path).model
    run_config = checkpoint.parent / CONFIG_FILE
    if not run_config.is_file():
        raise ConfigError(f"No configuration given and no {CONFIG_FILE} next to {checkpoint}")
    model = OmegaConf.merge(OmegaConf.structured(ModelConfig), OmegaConf.load(run_config).model)
    cfg: ModelConfig = OmegaConf.to_object(model)
    validate_model_config(cfg)
    return cfg


def cmd_eval(args: Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    cfg = _model_config_for(checkpoint, args.config)
    params = load_params(checkpoint, cfg)
    dataset = BagDataset(args.data, args.split)
    metrics = evaluate(dataset, params, cfg, args.seed)
    values = {"split": args.split, **metrics.as_dict()}
    report = Path(args.report) if args.report else checkpoint.parent / f"metrics_{args.split}.txt"
    write_report(report, values)
    _print_values(values)
    return 0


def cmd_gradcheck(args: Namespace) -> int:
    results = run_gradcheck(args.size, args.seed)
    failures = [result for result in results if not result.passed]
    for result in results:
        status = "ok" if result.passed else "FAILED"
        print(f"{result.check}.{result.tensor}={result.rel_error:.3e} {status}")
    _print_values({"checks": len(results), "failures": len(failures)})
    return 0 if not failures else 1


def cmd_bench(args: Namespace) -> int:
    cfg = load_config(args.config).model if args.config else ModelConfig()
    cfg = dataclasses.replace(cfg, d=args.dim, in_dim=args.dim)
    if args.layers is not None:
        cfg.n_layers = args.layers
    n_list = _int_list(args.n_list)
    reports = bench(n_list, cfg)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_curve(out_dir / HGMAMBA_CURVE, n_list, [report.total_flops for report in reports])
    write_curve(out_dir / ATTENTION_CURVE, n_list, [report.attention_flops for report in reports])

    table = pd.DataFrame([{"n": report.n_nodes, **report.components, "total": report.total_flops,
                           "param_bytes": report.parameter_bytes, "activation_bytes": report.activation_bytes,
                           "attention": report.attention_flops,
                           "attention_activation_bytes": report.attention_activation_bytes,
                           "ratio": round(report.attention_ratio, 3)} for report in reports])
    text = table.to_string(index=False)
    (out_dir / BENCH_TABLE).write_text(text + "\n", encoding="utf-8")
    print(text)
    totals = [report.total_flops for report in reports]
    attention = [report.attention_flops for report in reports]
    _print_values({"hgmamba_growth": ",".join(f"{r:.3f}" for r in growth_ratio(totals)),
                   "attention_growth": ",".join(f"{r:.3f}" for r in growth_ratio(attention)),
                   "activation_memory": format_bytes(reports[-1].activation_bytes),
                   "attention_activation_memory": format_bytes(reports[-1].attention_activation_bytes)})
    return 0


def format_scan_set(scan, bag_id: str) -> str:
    lines = [f"bag={bag_id}", f"n_nodes={scan.n_nodes}", f"n_sequences={scan.n_sequences}",
             f"total_tokens={scan.total_tokens}"]
    for m, sequence in enumerate(scan.sequences):
        lines.append(f"sequence {m} strategy={sequence.strategy} length={sequence.length}")
        lines.append("  order " + " ".join(str(int(v)) for v in sequence.order))
        if sequence.parents is not None:
            lines.append("  parents " + " ".join(str(int(v)) for v in sequence.parents[:sequence.length]))
            lines.append("  restarts " + " ".join(str(v) for v in sequence.restarts))
    for node, entries in enumerate(scan.membership):
        lines.append(f"node {node} " + " ".join(f"({m},{p})" for m, p in entries))
    return "\n".join(lines) + "\n"


def cmd_scan(args: Namespace) -> int:
    cfg = load_config(args.config).model if args.config else ModelConfig()
    bag = find_bag(args.data, args.bag)
    hg = build_structure(bag, cfg)
    scan = build_scan_set(hg, cfg.m_sequences, scan_rng(args.seed, bag.id, args.epoch), cfg.t_ratio,
                          cfg.scan_strategy)
    sys.stdout.write(format_scan_set(scan, bag.id))
    return 0


# ----------------------------------------------------------------------------------------------------------------------
def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="hgmamba", description="Hypergraph scanning & selective state space MIL toolbox")
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser("synth", help="Generates a synthetic planted motif dataset")
    synth.add_argument("--out", type=str, required=True, help="The output dataset directory")
    synth.add_argument("--bags", type=int, required=True, help="The number of bags")
    synth.add_argument("--grid", type=str, default="14x14", help="The tile grid RxC of every bag")
    synth.add_argument("--dim", type=int, default=32, help="The feature dimension")
    synth.add_argument("--classes", type=int, default=2)
    synth.add_argument("--motif", type=float, default=2.0, help="The motif strength")
    synth.add_argument("--high-order", action="store_true", help="Whether the class requires two motifs")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--splits", type=str, default=None, help="Explicit split counts train,val,test")
    synth.set_defaults(func=cmd_synth)

    train = subparsers.add_parser("train", help="Trains a model on a dataset directory")
    train.add_argument("--data", type=str, required=True)
    train.add_argument("--config", type=str, default=None, help="A key=value configuration file")
    train.add_argument("--out", type=str, required=True)
    train.add_argument("--set", type=str, action="append", help="A key=value override (repeatable)")
    train.add_argument("--sweep", type=str, default=None, help="KEY=V1,V2,... runs one training per value")
    train.add_argument("--resume", action="store_true", help="Continues the run found in the output directory")
    train.set_defaults(func=cmd_train)

    evaluation = subparsers.add_parser("eval", help="Evaluates a checkpoint on a split")
    evaluation.add_argument("--data", type=str, required=True)
    evaluation.add_argument("--checkpoint", type=str, required=True)
    evaluation.add_argument("--split", type=str, default="test", choices=["train", "val", "test"])
    evaluation.add_argument("--config", type=str, default=None)
    evaluation.add_argument("--seed", type=int, default=0, help="The seed of the evaluation scan sets")
    evaluation.add_argument("--report", type=str, default=None, help="The path of the text report")
    evaluation.set_defaults(func=cmd_eval)

    gradcheck = subparsers.add_parser("gradcheck", help="Runs the finite difference suite")
    gradcheck.add_argument("--size", type=str, default="tiny", choices=list(GRADCHECK_SIZES))
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.set_defaults(func=cmd_gradcheck)

    bench_parser = subparsers.add_parser("bench", help="Analytic FLOPs and memory comparison with attention")
    bench_parser.add_argument("--n-list", type=str, default="1000,2000,4000,8000")
    bench_parser.add_argument("--dim", type=int, default=512)
    bench_parser.add_argument("--layers", type=int, default=None)
    bench_parser.add_argument("--config", type=str, default=None)
    bench_parser.add_argument("--out", type=str, default=".")
    bench_parser.set_defaults(func=cmd_bench)

    scan = subparsers.add_parser("scan", help="Dumps the scan set of a bag")
    scan.add_argument("--data", type=str, required=True)
    scan.add_argument("--bag", type=str, required=True)
    scan.add_argument("--seed", type=int, default=0)
    scan.add_argument("--epoch", type=int, default=0)
    scan.add_argument("--config", type=str, default=None)
    scan.set_defaults(func=cmd_scan)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Runs a subcommand, returns the exit status (argparse exits with status 2 on unknown flags)"""
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (HGMambaError, OSError, ValueError, KeyError, AssertionError) as error:
        print(f"[ERROR] {args.command}: {error}", file=sys.stderr)
        return 1
