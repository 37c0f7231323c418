# stotrans/main.py
"""
Command-line entry point.

    python -m stotrans train   --config run.cfg
    python -m stotrans eval    --checkpoint runs/x/model.ckpt [--data test.tsv] [--ood ood.tsv]
    python -m stotrans compare --config run.cfg
    python -m stotrans sweep   --config run.cfg
    python -m stotrans verify  [--trials 1000]

Exit codes: 0 success, 1 config error, 2 data error, 3 training divergence,
4 verification failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from stotrans.components.report_display import ReportWriter
from stotrans.engine.checkpoint import load_checkpoint, save_checkpoint
from stotrans.engine.model import ModelPredictor
from stotrans.errors import CheckpointError, ConfigError, DataError, StoTransError, TrainingDivergence, VerificationFailure
from stotrans.services.experiment_service import (
    MODE_METHODS,
    RunConfig,
    build_splits,
    compare,
    evaluate,
    method_label,
    sweep,
    train_run,
)
from stotrans.services.training_service import mc_dropout_model
from stotrans.services.verification_service import DEFAULT_FORWARDS, DEFAULT_TRIALS, PROPERTY_NAMES, run_battery
from stotrans.text.datasets import load_tsv
from stotrans.text.tokenizer import Vocab
from stotrans.utils import configure_logging, ensure_out_dir, output_path

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
VOCAB_NAME = "vocab.json"
RUN_CONFIG_NAME = "run_config.json"


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError([f"--set expects KEY=VALUE, got {item!r}"])
        values[key.strip()] = value.strip()
    for key in ("seed", "out", "runs"):
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return values


def _prepare(args: argparse.Namespace) -> Tuple[RunConfig, Path]:
    cfg = RunConfig.load(args.config, _overrides(args))
    out = ensure_out_dir(cfg["out"])
    configure_logging(out, args.log_level)
    logger.info(f"Output directory: {out.resolve()}")
    return cfg, out


def cmd_train(args: argparse.Namespace) -> int:
    cfg, out = _prepare(args)
    writer = ReportWriter(out)
    splits = build_splits(cfg)
    try:
        model, history = train_run(cfg, splits)
    except TrainingDivergence as e:
        if e.history is not None:
            writer.write_history(e.history)
        raise
    save_checkpoint(model, output_path(out, CHECKPOINT_NAME))
    splits.vocab.to_json(output_path(out, VOCAB_NAME))
    cfg.to_json(output_path(out, RUN_CONFIG_NAME))
    writer.write_history(history)
    print(f"Best epoch {history.best_epoch}: valid {cfg['metric']} {history.best_metric:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    model = load_checkpoint(checkpoint)

    saved_config = checkpoint.parent / RUN_CONFIG_NAME
    config_path = args.config or (saved_config if saved_config.is_file() else None)
    overrides = _overrides(args)
    overrides.setdefault("out", str(checkpoint.parent))
    cfg = RunConfig.load(config_path, overrides) if config_path else None
    out = ensure_out_dir(cfg["out"] if cfg else overrides["out"])
    configure_logging(out, args.log_level)

    runs = args.runs or (cfg["runs"] if cfg else 10)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    metric = args.metric or (cfg["metric"] if cfg else "accuracy")

    max_len, num_classes = model.config.max_seq_len, model.config.num_classes
    if args.data:
        vocab_path = checkpoint.parent / VOCAB_NAME
        if not vocab_path.is_file():
            raise DataError(f"vocabulary {vocab_path} not found next to the checkpoint")
        vocab = Vocab.from_json(vocab_path)
        test = load_tsv(args.data, vocab, "test", max_len, num_classes=num_classes)
        ood = load_tsv(args.ood, vocab, "ood", max_len, num_classes=num_classes) if args.ood else None
    elif cfg is not None:
        splits = build_splits(cfg)
        vocab = splits.vocab
        test = splits.test
        ood = load_tsv(args.ood, vocab, "ood", max_len, num_classes=num_classes) if args.ood else splits.ood
    else:
        raise ConfigError(["eval needs --data, --config or a run_config.json next to the checkpoint"])
    if len(vocab) != model.config.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} entries, checkpoint expects {model.config.vocab_size}")

    attention = model.config.attention
    if args.mc_dropout is not None:
        predictor = mc_dropout_model(model, args.mc_dropout)
        label = method_label("mc-dropout", rate=args.mc_dropout)
    else:
        predictor = ModelPredictor(model)
        label = method_label(MODE_METHODS[attention.mode], attention, model.config.dropout_rate)

    evaluation = evaluate(predictor, test, ood, runs, seed, metric, label)
    text = ReportWriter(out).write_evaluations([evaluation], metric, runs, pdf=args.pdf)
    print(text, end="")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg, out = _prepare(args)
    writer = ReportWriter(out)
    rows, histories = compare(cfg, build_splits(cfg))
    for key, history in histories.items():
        writer.write_history(history, f"history_{key}.csv")
    text = writer.write_evaluations(rows, cfg["metric"], cfg["runs"], pdf=cfg["pdf_report"])
    print(text, end="")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg, out = _prepare(args)
    frame = ReportWriter(out).write_sweep(sweep(cfg, build_splits(cfg)), pdf=cfg["pdf_report"])
    print(frame.to_string(index=False))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    if args.out:
        out = ensure_out_dir(args.out)
        configure_logging(out, args.log_level)
    results = run_battery(args.seed if args.seed is not None else 0, args.trials, args.forwards, args.only)
    for result in results:
        print(result.render())
    if args.out:
        ReportWriter(out).write_verification(results)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailure(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: {', '.join(failed)}")
    print(f"All {len(results)} properties passed")
    return 0


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="run config file (key = value, or .json)")
    parser.add_argument("--seed", type=int, help="top-level seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--runs", type=int, help="inference runs T")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stotrans", description="Stochastic-attention transformer classifiers with uncertainty reports")
    parser.add_argument("--verbose", action="store_const", const=logging.DEBUG, default=logging.INFO,
                        dest="log_level", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one model and write its checkpoint and history")
    _add_common(train)
    train.set_defaults(func=cmd_train)

    evaluate_cmd = sub.add_parser("eval", help="multi-run uncertainty evaluation of a checkpoint")
    _add_common(evaluate_cmd, config_required=False)
    evaluate_cmd.add_argument("--checkpoint", required=True)
    evaluate_cmd.add_argument("--data", help="in-domain TSV file (label<TAB>text)")
    evaluate_cmd.add_argument("--ood", help="out-of-domain TSV file")
    evaluate_cmd.add_argument("--metric", choices=["accuracy", "mcc"])
    evaluate_cmd.add_argument("--mc-dropout", type=float, metavar="RATE", help="evaluate as MC-dropout with this rate")
    evaluate_cmd.add_argument("--pdf", action="store_true", help="also write report.pdf")
    evaluate_cmd.set_defaults(func=cmd_eval)

    compare_cmd = sub.add_parser("compare", help="train and evaluate several methods on the same data")
    _add_common(compare_cmd)
    compare_cmd.set_defaults(func=cmd_compare)

    sweep_cmd = sub.add_parser("sweep", help="temperature sweep for sto and h-sto attention")
    _add_common(sweep_cmd)
    sweep_cmd.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", help="run the property battery")
    verify.add_argument("--seed", type=int)
    verify.add_argument("--trials", type=int, default=DEFAULT_TRIALS, help="centroid-bound trials")
    verify.add_argument("--forwards", type=int, default=DEFAULT_FORWARDS, help="normalization sweep forwards")
    verify.add_argument("--only", nargs="+", choices=PROPERTY_NAMES, help="run a subset of properties")
    verify.add_argument("--out", help="also write verify.txt here")
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(None, args.log_level)
    try:
        return args.func(args)
    except ConfigError as e:
        for message in e.errors:
            logger.error(f"config: {message}")
        return e.exit_code
    except StoTransError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (ValueError, FloatingPointError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
