"""Command-line entry points: ``python -m app.main <command> [options]``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from app.core.config import config_to_text, load_config, settings
from app.core.errors import TabError
from app.core.logging import configure_logging
from app.models.evaluation import SWEEP_PRESETS, ResultTable
from app.services import checkpoint
from app.services.decoding import bleu_of
from app.services.diagnostics import GRAD_TARGETS, run_ctc_oracle_check, run_grad_checks
from app.services.experiments import emit_report, load_or_build_corpus, run_experiment, run_sweep
from app.services.synthdata import export_corpus
from app.services.training import TrainingService
from app.utils import diffcore

logger = logging.getLogger("app")


def _emit(payload: dict):
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def cmd_gen_data(args, config) -> int:
    corpus = load_or_build_corpus(config)
    export_corpus(corpus, args.out)
    _emit({"corpus": str(args.out), "sizes": corpus.sizes(), "seed": corpus.seed})
    return 0


def cmd_pretrain(args, config) -> int:
    service = TrainingService(config, load_or_build_corpus(config), args.out)
    _, record, path = service.pretrain_asr() if args.command == "pretrain-asr" else service.pretrain_mt()
    _emit({"checkpoint": str(path), "best_epoch": record.best_epoch, "stop_epoch": record.stop_epoch})
    return 0


def cmd_finetune(args, config) -> int:
    service = TrainingService(config, load_or_build_corpus(config), args.out)
    _, record, path = service.finetune_st(args.asr, args.mt)
    _emit(
        {
            "checkpoint": str(path),
            "best_epoch": record.best_epoch,
            "best_dev_bleu": record.best_score,
            "skipped_utterances": record.skipped_utterances,
        }
    )
    return 0


def cmd_evaluate(args, config) -> int:
    corpus = load_or_build_corpus(config)
    model, _ = checkpoint.load_checkpoint(args.ckpt)
    beam = args.beam or config.beam
    bleu = bleu_of(model, corpus.split(args.split), corpus.vocab, beam, config.max_decode_len, config.batch_size,
                   smooth=args.smooth)
    _emit({"checkpoint": str(args.ckpt), "split": args.split, "beam": beam, "bleu": bleu})
    return 0


def cmd_run(args, config) -> int:
    row, record = run_experiment(config, args.out)
    table = ResultTable(rows=[row])
    emit_report(table, {f"{row.cell_id}/{row.seed}": record}, args.out)
    _emit(row.dict())
    return 0


def cmd_sweep(args, config) -> int:
    table, records = run_sweep(SWEEP_PRESETS[args.preset], config, args.out, workers=args.workers)
    emit_report(table, records, args.out)
    print(table.summary().to_string(index=False))
    return 0 if all(row.completed for row in table.rows) else 1


def cmd_grad_check(args, config) -> int:
    reports = run_grad_checks(args.target or None, seed=config.seed, tol=args.tol, max_entries=args.max_entries)
    _emit({name: {"passed": r.passed, "max_rel_error": r.max_rel_error} for name, r in reports.items()})
    return 0 if all(r.passed for r in reports.values()) else 1


def cmd_oracle(args, config) -> int:
    report = run_ctc_oracle_check(args.cases, seed=config.seed)
    _emit({"cases": len(report.cases), "max_error": report.max_error, "passed": report.passed})
    return 0 if report.passed else 1


def cmd_average(args, config) -> int:
    manifest = checkpoint.average_checkpoints(args.ckpts, args.out)
    _emit({"averaged": [str(c) for c in args.ckpts], "out": str(args.out), "tensors": len(manifest.tensors)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tab", description=settings.PROJECT_NAME)
    parser.add_argument("--config", type=Path, default=None, help="Flat 'key = value' config file")
    parser.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    parser.add_argument("--out", type=Path, default=Path(settings.OUTPUT_DIR), help="Output directory")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen-data", help="Generate and export the synthetic corpus").set_defaults(handler=cmd_gen_data)
    commands.add_parser("pretrain-asr", help="Pre-train the speech encoder with CTC").set_defaults(handler=cmd_pretrain)
    commands.add_parser("pretrain-mt", help="Pre-train the shared transformer").set_defaults(handler=cmd_pretrain)

    finetune = commands.add_parser("finetune-st", help="Fine-tune speech translation with the auxiliary branch")
    finetune.add_argument("--asr", type=Path, required=True, help="ASR checkpoint directory")
    finetune.add_argument("--mt", type=Path, required=True, help="MT checkpoint directory")
    finetune.set_defaults(handler=cmd_finetune)

    evaluate = commands.add_parser("evaluate", help="BLEU of a checkpoint on a corpus split")
    evaluate.add_argument("--ckpt", type=Path, required=True)
    evaluate.add_argument("--split", default="st_test", choices=["st_dev", "st_test"])
    evaluate.add_argument("--beam", type=int, default=None)
    evaluate.add_argument("--smooth", action="store_true", help="Add-one smoothing for orders above 1")
    evaluate.set_defaults(handler=cmd_evaluate)

    commands.add_parser("run", help="Pre-train, fine-tune and score one configuration").set_defaults(handler=cmd_run)

    sweep = commands.add_parser("sweep", help="Run a grid of fine-tuning configurations")
    sweep.add_argument("--preset", default="table2", choices=sorted(SWEEP_PRESETS))
    sweep.add_argument("--workers", type=int, default=0, help="Parallel processes (0: one per physical core)")
    sweep.set_defaults(handler=cmd_sweep)

    grad = commands.add_parser("grad-check", help="Finite-difference gradient validation")
    grad.add_argument("--target", action="append", choices=GRAD_TARGETS)
    grad.add_argument("--tol", type=float, default=1e-4)
    grad.add_argument("--max-entries", type=int, default=4, help="Entries sampled per tensor")
    grad.set_defaults(handler=cmd_grad_check)

    oracle = commands.add_parser("ctc-oracle-check", help="Compare CTC loss with path enumeration")
    oracle.add_argument("--cases", type=int, default=200)
    oracle.set_defaults(handler=cmd_oracle)

    average = commands.add_parser("average-ckpts", help="Element-wise mean of checkpoints into --out")
    average.add_argument("ckpts", type=Path, nargs="+")
    average.set_defaults(handler=cmd_average)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, settings.LOG_FORMAT)
    torch.set_num_threads(settings.TORCH_THREADS)
    try:
        config = load_config(args.config, {"seed": args.seed})
        diffcore.set_precision(config.precision)
        args.out.mkdir(parents=True, exist_ok=True)
        logger.debug("Resolved config:\n" + config_to_text(config))
        return args.handler(args, config)
    except TabError as e:
        logger.error(str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
