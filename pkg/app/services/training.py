import logging
import math
import shutil
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import psutil
import torch
from torch import nn

from app.core.config import RunConfig, config_to_text
from app.core.errors import TrainingDivergedError
from app.models.corpus import Batch, CorpusBundle, UtteranceTriple
from app.models.training import (
    METRIC_COLUMNS,
    EpochRecord,
    MetricRow,
    ModelConfig,
    RunRecord,
    Stage,
    TrainConfig,
)
from app.services import checkpoint
from app.services.decoding import bleu_of, dev_loss
from app.services.network import AsrModel, MtModel, StModel, build_model
from app.services.synthdata import batch as make_batches
from app.services.tab import TabRngs, forward_tab, init_from_pretrained, modality_gap_accuracy
from app.utils import diffcore
from app.utils.objectives import ce_label_smoothed
from app.utils.optim import adam_step, lr_at, make_adam

logger = logging.getLogger(__name__)

STAGE_CODES = {Stage.ASR: 11, Stage.MT: 12, Stage.ST: 13}

StepResult = Tuple[Optional[torch.Tensor], Dict[str, Optional[float]], int]


class EarlyStopping:
    """Stop once the dev score has not improved for ``patience`` epochs (higher is better)."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_score: Optional[float] = None
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> bool:
        if self.best_score is None or score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


class BestCheckpoints:
    """Keeps the ``k`` best epoch checkpoints on disk; earlier epochs win ties."""

    def __init__(self, directory: Path, k: int):
        self.directory = directory
        self.k = k
        self.kept: List[Tuple[float, int, Path]] = []

    def offer(self, model: nn.Module, epoch: int, score: float, seed: int):
        # epochs arrive in order, so an equal earlier score outranks this one
        if sum(1 for kept_score, _, _ in self.kept if kept_score >= score) >= self.k:
            return
        path = self.directory / f"epoch_{epoch:03d}"
        checkpoint.save_checkpoint(model, path, seed)
        self.kept = sorted(self.kept + [(score, epoch, path)], key=lambda item: (-item[0], item[1]))
        for _, _, dropped in self.kept[self.k :]:
            shutil.rmtree(dropped, ignore_errors=True)
        self.kept = self.kept[: self.k]

    @property
    def paths(self) -> List[Path]:
        return [path for _, _, path in self.kept]


class TrainingService:
    """Runs the pre-training and fine-tuning stages for one configuration and seed."""

    def __init__(self, config: RunConfig, corpus: CorpusBundle, out_dir: Path):
        self.config = config
        self.corpus = corpus
        self.vocab = corpus.vocab
        self.out_dir = Path(out_dir)
        self.model_config = ModelConfig.from_run(config, self.vocab)
        self._check_system_resources()

    def _check_system_resources(self):
        try:
            available_gb = psutil.virtual_memory().available / (1024**3)
            logger.info(f"Available system memory: {available_gb:.2f} GB, {psutil.cpu_count()} CPUs")
            if available_gb < 1:
                logger.warning(f"Limited memory available ({available_gb:.2f} GB); consider a smaller batch_size")
        except Exception as e:
            logger.warning(f"Error checking system resources: {str(e)}")

    def pretrain_asr(self) -> Tuple[AsrModel, RunRecord, Path]:
        train = TrainConfig.from_run(self.config, Stage.ASR)
        model = build_model(Stage.ASR, self.model_config, self.config.seed)

        def step(m: AsrModel, b: Batch, n: int) -> StepResult:
            loss = m.loss(b, diffcore.make_generator(train.seed, STAGE_CODES[Stage.ASR], n))
            return loss, {"loss_ctc": float(loss)}, 0

        def score(m: AsrModel) -> Tuple[float, Optional[float], Optional[float]]:
            return -dev_loss(m, self.corpus.st_dev, self.vocab, train.batch_size), None, None

        return self._train(model, train, self.corpus.asr, step, score)

    def pretrain_mt(self) -> Tuple[MtModel, RunRecord, Path]:
        train = TrainConfig.from_run(self.config, Stage.MT)
        model = build_model(Stage.MT, self.model_config, self.config.seed)

        def step(m: MtModel, b: Batch, n: int) -> StepResult:
            log_probs = m(b, diffcore.make_generator(train.seed, STAGE_CODES[Stage.MT], n))
            loss = ce_label_smoothed(log_probs, b.tgt_out, train.label_smoothing, b.tgt_mask)
            return loss, {"loss_ce_o": float(loss)}, 0

        def score(m: MtModel) -> Tuple[float, Optional[float], Optional[float]]:
            return -dev_loss(m, self.corpus.st_dev, self.vocab, train.batch_size), None, None

        return self._train(model, train, self.corpus.mt, step, score)

    def finetune_st(self, asr_ckpt: Path, mt_ckpt: Path) -> Tuple[StModel, RunRecord, Path]:
        """Fine-tune the speech translation model with the auxiliary branch."""
        train = TrainConfig.from_run(self.config, Stage.ST)
        model = build_model(Stage.ST, self.model_config, train.seed)
        asr, _ = checkpoint.load_checkpoint(asr_ckpt)
        mt, _ = checkpoint.load_checkpoint(mt_ckpt)
        init_from_pretrained(model, asr, mt)
        upsilon_state: List[Optional[float]] = [None]

        def step(m: StModel, b: Batch, n: int) -> StepResult:
            out = forward_tab(m, b, train, TabRngs.for_step(train.seed, n), upsilon_state[0])
            if out.loss is None:
                return None, {}, out.skipped
            upsilon_state[0] = out.upsilon
            parts = out.breakdown
            fields = {
                "loss_ce_o": parts.ce_o,
                "loss_ctc": parts.ctc,
                "upsilon": out.upsilon,
                "p_star": out.p_star,
                "acc_o": out.acc_o,
            }
            if not train.single_branch:
                fields.update(
                    loss_ce_a=parts.ce_a,
                    loss_cons=parts.cons,
                    ratio_aux_orig=parts.ratio_aux_orig,
                    acc_a=out.acc_a,
                )
            return out.loss, fields, out.skipped

        def score(m: StModel) -> Tuple[float, Optional[float], Optional[float]]:
            bleu = bleu_of(m, self.corpus.st_dev, self.vocab, beam=1, max_len=train.max_decode_len,
                           batch_size=train.batch_size)
            speech_acc, text_acc = modality_gap_accuracy(m, self.corpus.st_dev, self.vocab, train.batch_size)
            return bleu, speech_acc, text_acc

        return self._train(model, train, self.corpus.st_train, step, score)

    def _train(
        self,
        model: nn.Module,
        train: TrainConfig,
        items: List[UtteranceTriple],
        step_fn: Callable[[nn.Module, Batch, int], StepResult],
        score_fn: Callable[[nn.Module], Tuple[float, Optional[float], Optional[float]]],
    ) -> Tuple[nn.Module, RunRecord, Path]:
        stage = Stage(train.stage)
        stage_dir = self.out_dir / stage.value
        stage_dir.mkdir(parents=True, exist_ok=True)
        (stage_dir / "manifest.txt").write_text(
            config_to_text(self.config, {"stage": stage.value, "train_seed": train.seed})
        )
        if not items:
            raise ValueError(f"{stage.value} training split is empty")

        params = diffcore.ParamSet.from_module(model, train.seed)
        optimizer = make_adam(params, train.adam_beta1, train.adam_beta2, train.adam_eps)
        stopper = EarlyStopping(train.patience)
        best = BestCheckpoints(stage_dir / "checkpoints", train.average_best)
        record = RunRecord(stage=stage, config=self.config.dict())
        rows: List[MetricRow] = []
        step = 0
        logger.info(f"Training {stage.value}: {len(items)} utterances, up to {train.max_epochs} epochs")

        for epoch in range(1, train.max_epochs + 1):
            losses = []
            shuffle = int(np.random.SeedSequence([train.seed, STAGE_CODES[stage], epoch]).generate_state(1)[0])
            for group in make_batches(items, train.batch_size, self.vocab, shuffle_seed=shuffle):
                step += 1
                lr = lr_at(step, train.peak_lr, train.warmup, train.schedule)
                loss, fields, skipped = step_fn(model, group, step)
                record.skipped_utterances += skipped
                if loss is None:
                    logger.warning(f"Step {step}: every utterance of the batch was skipped")
                    continue
                if not math.isfinite(float(loss)):
                    logger.error(f"{stage.value} loss is {float(loss)} at step {step}")
                    raise TrainingDivergedError(stage.value, step)
                diffcore.backward(loss, params)
                adam_step(optimizer, params, lr, step)
                losses.append(float(loss))
                rows.append(MetricRow(step=step, epoch=epoch, stage=stage, loss_total=float(loss), lr=lr, **fields))

            dev_score, speech_acc, text_acc = score_fn(model)
            improved = stopper.update(epoch, dev_score)
            best.offer(model, epoch, dev_score, train.seed)
            record.epochs.append(
                EpochRecord(
                    epoch=epoch,
                    train_loss=float(np.mean(losses)) if losses else float("nan"),
                    dev_score=dev_score,
                    improved=improved,
                    dev_acc_speech=speech_acc,
                    dev_acc_text=text_acc,
                )
            )
            logger.info(
                f"{stage.value} epoch {epoch}: train loss {record.epochs[-1].train_loss:.4f}, "
                f"dev score {dev_score:.4f}{' (best)' if improved else ''}"
            )
            if stopper.should_stop:
                record.early_stopped = True
                logger.info(f"{stage.value} early stop at epoch {epoch}; best epoch {stopper.best_epoch}")
                break

        record.rows = rows
        record.best_epoch = stopper.best_epoch
        record.best_score = stopper.best_score
        record.stop_epoch = record.epochs[-1].epoch
        record.best_checkpoints = [str(p) for p in best.paths]
        averaged = stage_dir / "averaged"
        checkpoint.average_checkpoints(best.paths, averaged)
        final, _ = checkpoint.load_checkpoint(averaged)
        write_metrics(record, stage_dir)
        return final, record, averaged


def write_metrics(record: RunRecord, directory: Path):
    """``metrics.csv`` (one row per step) and ``epochs.csv`` (one row per epoch)."""
    rows = [row.dict() for row in record.rows]
    pd.DataFrame(rows, columns=METRIC_COLUMNS).to_csv(directory / "metrics.csv", index=False)
    epochs = pd.DataFrame([e.dict() for e in record.epochs], columns=list(EpochRecord.__fields__))
    epochs.to_csv(directory / "epochs.csv", index=False)
