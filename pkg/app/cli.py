"""
Experiment harness: ``python -m app <subcommand>``.

    synth         generate train/test datasets
    train         det | int | pat-t | patch-only training
    infer         plain or PAT-I predictions for a dataset
    eval          metrics report, pair CSV and step-wise tables
    causal-check  additive-form algebra over discrete causal models

Exit codes: 0 success, 1 usage or configuration, 2 numeric or data
failure, 3 acceptance-check failure.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from app.core import causal, metrics, patching, synthgen, training
from app.core.config import dump_run_config, load_key_values, resolve_run_config, settings
from app.core.errors import ConfigError, PatLabError, UndefinedMetricError
from app.core.logging import configure_logging
from app.core.seeding import substream
from app.models.bundle import WeightSource
from app.models.params import TrainMode
from app.schemas import RunConfig
from app.storage import tables
from app.storage.checkpoints import int_checkpoint_name, load_checkpoint, save_checkpoint
from app.storage.datasets import load_dataset, save_dataset

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ACCEPTANCE = 3

CHAIN_TOLERANCE = 1e-10


class HarnessParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ============= Configuration =============

# command-line destination -> flat config key
FLAG_KEYS = {
    "seed": "seed",
    "mode": "mode",
    "loss": "loss.kind",
    "gamma_neg": "loss.gamma_neg",
    "gamma_pos": "loss.gamma_pos",
    "clip": "loss.clip",
    "tau": "fusion.tau",
    "lam": "fusion.lambda",
    "weight_source": "fusion.weight_source",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "batch": "train.batch",
    "hidden": "train.hidden",
    "ema": "train.ema",
    "warmup": "train.warmup",
    "aux_weight_loss": "train.aux_weight_loss",
    "n_train": "synth.n_train",
    "n_test": "synth.n_test",
    "num_classes": "synth.num_classes",
    "image_side": "synth.image_side",
    "noise_sd": "synth.noise_sd",
    "rho": "synth.rho",
    "threshold": "metrics.threshold",
    "co_threshold": "metrics.co_threshold",
}


def resolve(args: argparse.Namespace) -> Tuple[RunConfig, Set[str]]:
    """RunConfig from defaults < --config file < flags, plus the keys set explicitly."""
    file_values = load_key_values(args.config) if args.config else {}
    overrides: Dict[str, Any] = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    config = resolve_run_config(file_values, overrides)
    return config, set(file_values) | set(overrides)


def output_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or settings.OUTPUT_DIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_snapshot(config: RunConfig, args: argparse.Namespace, out: Path) -> Path:
    """Resolved key=value config; paths and subcommand are recorded as comments."""
    header = [f"# command: {args.command}"]
    for name in ("train_data", "eval_data", "data", "checkpoint", "resume", "predictions", "compare"):
        value = getattr(args, name, None)
        if value:
            values = value if isinstance(value, list) else [value]
            header.append(f"# {name}: {' '.join(str(v) for v in values)}")
    path = out / "config.txt"
    path.write_text("\n".join(header) + "\n" + dump_run_config(config), encoding="utf-8")
    return path


# ============= synth =============

def cmd_synth(args: argparse.Namespace) -> int:
    config, _ = resolve(args)
    out = output_dir(args)
    cfg = config.synth
    spec = synthgen.default_spec(cfg)
    atlas = synthgen.default_atlas(spec, cfg, seed=config.seed)
    train, test = synthgen.generate_dataset(
        spec, atlas, cfg.n_train, cfg.n_test, config.seed, cfg.noise_sd, cfg.image_side
    )
    save_dataset(train, out / "train.dsb")
    save_dataset(test, out / "test.dsb")
    write_snapshot(config, args, out)

    print("label marginals (train):")
    marginals = pd.DataFrame({
        "class": range(spec.num_classes),
        "frequency": train.labels.mean(axis=0),
    })
    print(marginals.to_string(index=False))

    labels = train.labels
    source = "train"
    if args.mc_draws:
        labels = synthgen.sample_label_matrix(spec, substream(config.seed, "mc"), args.mc_draws)
        source = f"{args.mc_draws} draws"
    print(f"coupled pairs ({source}):")
    pairs = pd.DataFrame([
        {"a": c.source, "b": c.target, "rho": c.rho,
         "p_b_given_a": synthgen.conditional_frequency(labels, c.source, c.target)}
        for c in spec.couplings
    ])
    print(pairs.to_string(index=False))
    return EXIT_OK


# ============= train =============

def cmd_train(args: argparse.Namespace) -> int:
    config, _ = resolve(args)
    out = output_dir(args)
    cfg = config.training()
    dataset = load_dataset(args.train_data)
    eval_dataset = load_dataset(args.eval_data) if args.eval_data else None
    resume = [load_checkpoint(p) for p in args.resume or []]
    write_snapshot(config, args, out)

    mode = config.mode
    if mode == TrainMode.INT:
        checkpoints = training.train_int(dataset, cfg, eval_dataset, resume or None)
        for checkpoint in checkpoints:
            save_checkpoint(checkpoint, out / int_checkpoint_name(checkpoint.class_index))
    else:
        if len(resume) > 1:
            raise ConfigError(f"{mode.value} training resumes from a single checkpoint")
        checkpoint = training.TRAINERS[mode](dataset, cfg, eval_dataset, resume[0] if resume else None)
        save_checkpoint(checkpoint, out / f"{mode.value}.patc")
        checkpoints = [checkpoint]

    tables.write_train_log(checkpoints, out / "train_log.csv")
    for checkpoint in checkpoints:
        summary = " ".join(f"{k}={v:.6f}" for k, v in checkpoint.metrics.items())
        prefix = f"class {checkpoint.class_index}: " if checkpoint.class_index is not None else ""
        print(f"{prefix}epoch {checkpoint.epoch} {summary}")
    return EXIT_OK


# ============= infer =============

def load_predictor(paths: Sequence[str]):
    """Single checkpoint, or the per-class files of independent training."""
    checkpoints = [load_checkpoint(p) for p in paths]
    if len(checkpoints) == 1 and checkpoints[0].mode != TrainMode.INT:
        return checkpoints[0].eval_params, checkpoints[0].mode
    if any(c.mode != TrainMode.INT for c in checkpoints):
        raise ConfigError("several checkpoints are only accepted for independent training")
    return training.assemble_int(checkpoints), TrainMode.INT


def cmd_infer(args: argparse.Namespace) -> int:
    config, explicit = resolve(args)
    out = output_dir(args)
    params, mode = load_predictor(args.checkpoint)
    dataset = load_dataset(args.data)
    if "fusion.weight_source" not in explicit:
        # pat-t and patch-only predictors weight patches with their theta head
        config = config.model_copy(update={"fusion": training.evaluation_fusion(mode, config.training())})
    write_snapshot(config, args, out)

    if args.infer_mode == "plain":
        logits = patching.plain_logits(params, dataset.images, tau=config.fusion.tau)
        table = tables.PredictionTable(logits)
    else:
        bundle = patching.pat_i_infer(params, dataset.images, config.fusion)
        table = tables.PredictionTable(bundle.image_logits, bundle.aggregated, bundle.tde)

    tables.write_predictions(table, out / "predictions.csv")
    print(f"{len(dataset)} predictions ({args.infer_mode}, {mode.value}) -> {out / 'predictions.csv'}")
    return EXIT_OK


# ============= eval =============

def _prediction_set(table: tables.PredictionTable, labels: np.ndarray, threshold: float):
    return metrics.PredictionSet(table.scores(), labels, threshold, table.scores_are_logits)


def cmd_eval(args: argparse.Namespace) -> int:
    config, _ = resolve(args)
    out = output_dir(args)
    table = tables.read_predictions(args.predictions)
    dataset = load_dataset(args.data)
    write_snapshot(config, args, out)

    threshold = config.metrics.threshold
    preds = _prediction_set(table, dataset.labels, threshold)
    aps = metrics.per_class_ap(preds)
    if not aps:
        raise UndefinedMetricError("no class has positive labels")
    suite = metrics.pr_f1_suite(preds)
    pairs = metrics.pair_scan(preds, config.metrics.co_threshold)
    tables.write_pairs(pairs, out / "pairs.csv")

    report: Dict[str, Any] = {"mAP": float(np.mean(list(aps.values())))}
    report.update({f"ap_{k}": v for k, v in aps.items()})
    report.update(suite.as_dict())
    report["pairs"] = len(pairs)
    report["pairs_mean_ctpr"] = pairs.mean("ctpr")
    report["pairs_mean_cfpr"] = pairs.mean("cfpr")

    if dataset.spec is not None and dataset.spec.couplings:
        coupled = metrics.pair_rates(preds, [(c.source, c.target) for c in dataset.spec.couplings])
        tables.write_pairs(coupled, out / "coupled_pairs.csv")
        report["coupled_mean_ctpr"] = coupled.mean("ctpr")
        report["coupled_mean_cfpr"] = coupled.mean("cfpr")

    if table.has_fusion:
        rows = metrics.stepwise_comparison(dataset.labels, table.image_logits, table.aggregated, table.tde)
        tables.write_stepwise(rows, out / "stepwise.csv")
        report["stepwise_pass_rate"] = metrics.stepwise_pass_rate(rows)

    if args.compare:
        other = tables.read_predictions(args.compare)
        other_aps = metrics.per_class_ap(_prediction_set(other, dataset.labels, threshold))
        tables.write_compare(aps, other_aps, out / "compare.csv")

    tables.write_report(report, out / "metrics.txt")
    for key, value in report.items():
        print(f"{key} = {value:.6f}" if isinstance(value, float) else f"{key} = {value}")
    return EXIT_OK


# ============= causal-check =============

def cmd_causal_check(args: argparse.Namespace) -> int:
    config, _ = resolve(args)
    out = output_dir(args)
    write_snapshot(config, args, out)

    rows = causal.causal_check(args.trials, args.constructed, config.seed)
    frame = pd.DataFrame(
        [{"kind": kind, "index": index, **vars(report)} for kind, index, report in rows],
        columns=["kind", "index", "tde_eq2", "term1", "term2", "alpha", "beta", "lam",
                 "premise_residual", "chain_residual", "degenerate", "denominator_sign"],
    )
    tables.write_frame(frame, out / "causal_check.csv")
    if len(frame):
        print(frame.to_string(index=False, max_rows=40))

    failures = causal.count_failures(rows, CHAIN_TOLERANCE)
    degenerate = int(frame["degenerate"].sum()) if len(frame) else 0
    print(f"models={len(rows)} degenerate={degenerate} failures={failures}")
    if failures:
        logger.error("%d constructed models exceed chain residual %.0e", failures, CHAIN_TOLERANCE)
        return EXIT_ACCEPTANCE
    return EXIT_OK


# ============= Parser =============

def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="root seed for every random substream")
    common.add_argument("--out", help=f"output directory (default {settings.OUTPUT_DIR})")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--log-level", help="logging level (default from LOG_LEVEL)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = HarnessParser(prog="python -m app", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate synthetic datasets")
    synth.add_argument("--n-train", type=int)
    synth.add_argument("--n-test", type=int)
    synth.add_argument("--num-classes", type=int)
    synth.add_argument("--image-side", type=int)
    synth.add_argument("--noise-sd", type=float)
    synth.add_argument("--rho", type=float)
    synth.add_argument("--mc-draws", type=int, default=0,
                       help="report coupled-pair conditionals from this many label draws")
    synth.set_defaults(handler=cmd_synth)

    train = sub.add_parser("train", parents=[common], help="train a predictor")
    train.add_argument("--mode", choices=[m.value for m in TrainMode])
    train.add_argument("--train-data", required=True)
    train.add_argument("--eval-data")
    train.add_argument("--resume", nargs="+", help="checkpoint(s) to continue from")
    train.add_argument("--loss", choices=["bce", "asl"])
    train.add_argument("--gamma-neg", type=float)
    train.add_argument("--gamma-pos", type=float)
    train.add_argument("--clip", type=float)
    train.add_argument("--tau", type=float)
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch", type=int)
    train.add_argument("--hidden", type=int)
    train.add_argument("--ema", type=float)
    train.add_argument("--warmup", type=int)
    train.add_argument("--aux-weight-loss", action="store_const", const=True)
    train.set_defaults(handler=cmd_train)

    infer = sub.add_parser("infer", parents=[common], help="predict a dataset")
    infer.add_argument("--checkpoint", nargs="+", required=True)
    infer.add_argument("--data", required=True)
    infer.add_argument("--mode", dest="infer_mode", choices=["plain", "pat-i"], default="pat-i")
    infer.add_argument("--lambda", dest="lam", type=float)
    infer.add_argument("--tau", type=float)
    infer.add_argument("--weight-source", choices=[s.value for s in WeightSource])
    infer.set_defaults(handler=cmd_infer)

    evaluate = sub.add_parser("eval", parents=[common], help="evaluate a prediction file")
    evaluate.add_argument("--predictions", required=True)
    evaluate.add_argument("--data", required=True, help="dataset holding the labels")
    evaluate.add_argument("--compare", help="second prediction file for a class-by-class AP diff")
    evaluate.add_argument("--threshold", type=float)
    evaluate.add_argument("--co-threshold", type=float)
    evaluate.set_defaults(handler=cmd_eval)

    check = sub.add_parser("causal-check", parents=[common], help="check the additive TDE form")
    check.add_argument("--trials", type=int, default=1000)
    check.add_argument("--constructed", type=int, default=1000)
    check.set_defaults(handler=cmd_causal_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except PatLabError as exc:
        logger.error("%s", exc)
        return exc.exit_code
