"""Single runs, sweeps over loss terms / weights / replacement probabilities, and report files."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
import psutil
import torch

from app.core.config import RunConfig, settings
from app.models.corpus import CorpusBundle, CorpusConfig
from app.models.evaluation import ResultRow, ResultTable, SweepCell, SweepSpec
from app.models.training import METRIC_COLUMNS, RunRecord, Stage, TrainConfig
from app.services.decoding import bleu_of
from app.services.synthdata import build_corpus, export_corpus, import_corpus
from app.services.training import TrainingService
from app.utils import diffcore

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["step", "seed", "epoch", "ratio_aux_orig", "upsilon", "p_star", "loss_ce_o", "loss_ce_a"]


@dataclass
class Pretrained:
    asr: Path
    mt: Path


def load_or_build_corpus(config: RunConfig) -> CorpusBundle:
    if config.data_dir and (Path(config.data_dir) / "corpus.json").is_file():
        logger.info(f"Loading corpus from {config.data_dir}")
        return import_corpus(Path(config.data_dir))
    return build_corpus(CorpusConfig.from_run(config), config.seed)


def pretrain(config: RunConfig, corpus: CorpusBundle, out_dir: Path) -> Pretrained:
    service = TrainingService(config, corpus, out_dir)
    _, _, asr = service.pretrain_asr()
    _, _, mt = service.pretrain_mt()
    return Pretrained(asr=asr, mt=mt)


def run_experiment(
    config: RunConfig,
    out_dir: Path,
    corpus: Optional[CorpusBundle] = None,
    pretrained: Optional[Pretrained] = None,
    cell_id: str = "single",
) -> Tuple[ResultRow, RunRecord]:
    """Pre-train (unless checkpoints are given), fine-tune and score one configuration."""
    diffcore.set_precision(config.precision)
    corpus = corpus or load_or_build_corpus(config)
    out_dir = Path(out_dir)
    pretrained = pretrained or pretrain(config, corpus, out_dir)
    model, record, _ = TrainingService(config, corpus, out_dir).finetune_st(pretrained.asr, pretrained.mt)
    train = TrainConfig.from_run(config, Stage.ST)
    dev = bleu_of(model, corpus.st_dev, corpus.vocab, config.beam, config.max_decode_len, config.batch_size)
    test = bleu_of(model, corpus.st_test, corpus.vocab, config.beam, config.max_decode_len, config.batch_size)
    row = ResultRow(
        cell_id=cell_id,
        divergence=config.divergence,
        alpha=config.alpha,
        p_star=config.p_star,
        seed=config.seed,
        dev_bleu=dev,
        test_bleu=test,
        epochs=record.convergence_epoch,
        ratio_first=record.window_ratio("first"),
        ratio_last=record.window_ratio("last"),
        label="baseline" if train.is_baseline else "tab",
    )
    logger.info(f"{cell_id} seed {config.seed}: dev BLEU {dev:.2f}, test BLEU {test:.2f}, "
                f"converged at epoch {record.convergence_epoch}")
    return row, record


def _run_cell(
    cell: SweepCell, base: RunConfig, corpus_dir: Path, pretrained: Pretrained, out_dir: Path
) -> Tuple[ResultRow, Optional[RunRecord]]:
    torch.set_num_threads(settings.TORCH_THREADS)
    config = cell.run_config(base)
    try:
        return run_experiment(
            config,
            out_dir / cell.cell_id / f"seed_{cell.seed}",
            corpus=import_corpus(corpus_dir),
            pretrained=pretrained,
            cell_id=cell.cell_id,
        )
    except Exception as e:
        logger.warning(f"Cell {cell.cell_id} seed {cell.seed} failed: {str(e)}")
        row = ResultRow(
            cell_id=cell.cell_id,
            divergence=cell.divergence,
            alpha=cell.alpha,
            p_star=cell.p_star,
            seed=cell.seed,
            note=f"failed: {type(e).__name__}: {e}",
        )
        return row, None


def sweep_workers(requested: int = 0) -> int:
    if requested > 0:
        return requested
    return max(1, psutil.cpu_count(logical=False) or 1)


def run_sweep(
    spec: SweepSpec, base: RunConfig, out_dir: Path, workers: int = 0
) -> Tuple[ResultTable, Dict[str, RunRecord]]:
    """Run every cell of ``spec``; a failing cell is recorded instead of aborting the sweep.

    The corpus and the pre-trained checkpoints come from the base seed and are
    shared by all cells, which vary the fine-tuning seed.
    """
    diffcore.set_precision(base.precision)
    out_dir = Path(out_dir)
    corpus = load_or_build_corpus(base)
    corpus_dir = out_dir / "corpus"
    export_corpus(corpus, corpus_dir)
    pretrained = pretrain(base, corpus, out_dir / "pretrained")
    cells = spec.cells()
    workers = min(sweep_workers(workers or settings.SWEEP_WORKERS), len(cells))
    logger.info(f"Sweep over {len(cells)} runs with {workers} worker(s)")

    if workers == 1:
        results = [_run_cell(cell, base, corpus_dir, pretrained, out_dir / "cells") for cell in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_cell, cell, base, corpus_dir, pretrained, out_dir / "cells") for cell in cells
            ]
            results = [future.result() for future in futures]

    table = ResultTable(rows=[row for row, _ in results])
    records = {f"{row.cell_id}/{row.seed}": record for row, record in results if record is not None}
    return table, records


def emit_report(table: ResultTable, records: Dict[str, RunRecord], out_dir: Path):
    """Write ``results.tsv``, ``summary.tsv``, ``runs/<cell>_s<seed>.csv`` and ``curves/<cell>.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "runs").mkdir(parents=True, exist_ok=True)
    (out_dir / "curves").mkdir(parents=True, exist_ok=True)
    table.frame().to_csv(out_dir / "results.tsv", sep="\t", index=False)
    table.summary().to_csv(out_dir / "summary.tsv", sep="\t", index=False)

    curves: Dict[str, List[pd.DataFrame]] = {}
    for key in sorted(records):
        cell_id, seed = key.rsplit("/", 1)
        frame = pd.DataFrame([row.dict() for row in records[key].rows], columns=METRIC_COLUMNS)
        frame.to_csv(out_dir / "runs" / f"{cell_id}_s{seed}.csv", index=False)
        if not frame.empty:
            curves.setdefault(cell_id, []).append(frame.assign(seed=int(seed)).reindex(columns=CURVE_COLUMNS))
    for cell_id, frames in sorted(curves.items()):
        curve = pd.concat(frames, ignore_index=True).sort_values(["step", "seed"], kind="mergesort")
        curve.to_csv(out_dir / "curves" / f"{cell_id}.csv", index=False)
    logger.info(f"Report written to {out_dir}")
