"""Fine-tuning forward with an auxiliary branch.

One step encodes speech once, shrinks it along the greedy CTC path into the
original branch ``o``, decodes it (pass 1), derives the replacement
probability from the uncertainty of that pass, builds the auxiliary branch
``a`` by copy-and-replace and decodes it again (pass 2).
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from app.core.errors import CheckpointError
from app.models.branch import BranchPair
from app.models.corpus import Batch, ExtendedVocab, UtteranceTriple
from app.models.losses import LossBreakdown
from app.models.training import TrainConfig, TransferReport
from app.services.network import AsrModel, MtModel, StModel
from app.services.synthdata import batch as make_batches
from app.utils import diffcore
from app.utils.branch import copy_replace, resolve_p_star, shrink
from app.utils.ctc import ctc_loss, greedy_path
from app.utils.objectives import ce_label_smoothed, consistency_loss, normalized_entropy, total_loss

logger = logging.getLogger(__name__)


@dataclass
class TabRngs:
    """Disjoint random streams of one step; ``None`` streams disable dropout."""

    speech: Optional[torch.Generator]
    orig: Optional[torch.Generator]
    aux: Optional[torch.Generator]
    replace: torch.Generator

    @classmethod
    def for_step(cls, seed: int, step: int, dropout: bool = True) -> "TabRngs":
        def stream(k: int) -> Optional[torch.Generator]:
            return diffcore.make_generator(seed, step, k) if dropout else None

        return cls(speech=stream(1), orig=stream(2), aux=stream(3), replace=diffcore.make_generator(seed, step, 4))


@dataclass
class TabOutput:
    loss: Optional[torch.Tensor]
    log_p: Optional[torch.Tensor]
    log_q: Optional[torch.Tensor]
    breakdown: Optional[LossBreakdown]
    upsilon: Optional[float]
    p_star: Optional[float]
    branches: List[BranchPair] = field(default_factory=list)
    kept: List[int] = field(default_factory=list)
    skipped: int = 0
    acc_o: Optional[float] = None
    acc_a: Optional[float] = None


def _pad_rows(rows: List[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([r.shape[0] for r in rows], dtype=torch.long)
    padded = torch.nn.utils.rnn.pad_sequence(rows, batch_first=True)
    return padded, torch.arange(padded.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)


def token_hits(log_probs: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> int:
    return int(((log_probs.detach().argmax(dim=-1) == targets) & mask).sum())


def token_accuracy(log_probs: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> float:
    return token_hits(log_probs, targets, mask) / max(int(mask.sum()), 1)


def shrink_batch(
    model: StModel, batch: Batch, rng: Optional[torch.Generator]
) -> Tuple[torch.Tensor, List[int], List[torch.Tensor], List[List[int]], List[torch.Tensor]]:
    """Speech encoder, CTC head and greedy-path shrinking for every utterance.

    Returns the CTC posteriors, the indices of utterances whose downsampled
    length can hold ``2|x|+1`` frames, and for those the shrunk sequences,
    their run labels and their per-utterance CTC losses.
    """
    h, lengths = model.encode_speech(batch, rng)
    log_probs = model.ctc(h)
    kept, shrunk, labels, ctc_terms = [], [], [], []
    for b in range(len(batch)):
        frames = int(lengths[b])
        x = batch.transcripts[b]
        if frames < 2 * len(x) + 1:
            logger.warning(f"Skipping {batch.uids[b]}: {frames} frames cannot align {len(x)} labels")
            continue
        utterance = log_probs[b, :frames]
        o, run_labels = shrink(h[b, :frames], greedy_path(utterance))
        kept.append(b)
        shrunk.append(o)
        labels.append(run_labels)
        ctc_terms.append(ctc_loss(utterance, x, model.blank_id))
    return log_probs, kept, shrunk, labels, ctc_terms


def forward_tab(
    model: StModel,
    batch: Batch,
    config: TrainConfig,
    rngs: TabRngs,
    upsilon_prev: Optional[float] = None,
) -> TabOutput:
    """Two-pass fine-tuning forward and its composite loss.

    ``upsilon_prev`` is the smoothed uncertainty of the previous step; it is
    blended in with weight ``config.upsilon_smoothing``.
    """
    p = model.dropout if rngs.orig is not None else 0.0
    _, kept, shrunk, labels, ctc_terms = shrink_batch(model, batch, rngs.speech)
    skipped = len(batch) - len(kept)
    if not kept:
        return TabOutput(loss=None, log_p=None, log_q=None, breakdown=None, upsilon=None, p_star=None,
                         skipped=skipped)

    sub = batch.subset(kept)
    o, o_mask = _pad_rows(shrunk)
    memory = model.shared.encode(o, o_mask, p, rngs.orig)
    log_p = model.shared.decode(sub.tgt_in, memory, o_mask, p, rngs.orig)

    upsilon = normalized_entropy(
        log_p, model.config.n_target_vocab, sub.tgt_mask, mode=config.entropy_mode, targets=sub.tgt_out
    )
    if upsilon_prev is not None and config.upsilon_smoothing > 0:
        upsilon = config.upsilon_smoothing * upsilon_prev + (1.0 - config.upsilon_smoothing) * upsilon
    p_star = resolve_p_star(config.policy, upsilon)

    table = model.shared.scaled_source_table()
    branches = [
        copy_replace(o_b, labels_b, table, p_star, rngs.replace, model.blank_id)
        for o_b, labels_b in zip(shrunk, labels)
    ]

    ce_o = ce_label_smoothed(log_p, sub.tgt_out, config.label_smoothing, sub.tgt_mask)
    ctc = torch.stack(ctc_terms).mean()
    acc_o = token_accuracy(log_p, sub.tgt_out, sub.tgt_mask)
    if config.single_branch:
        loss, breakdown = total_loss(ce_o, ctc=ctc, ctc_weight=config.ctc_weight, alpha=0.0)
        return TabOutput(loss=loss, log_p=log_p, log_q=None, breakdown=breakdown, upsilon=upsilon,
                         p_star=p_star, branches=branches, kept=kept, skipped=skipped, acc_o=acc_o)

    a, a_mask = _pad_rows([pair.a for pair in branches])
    memory_a = model.shared.encode(a, a_mask, p, rngs.aux)
    log_q = model.shared.decode(sub.tgt_in, memory_a, a_mask, p, rngs.aux)
    ce_a = ce_label_smoothed(log_q, sub.tgt_out, config.label_smoothing, sub.tgt_mask)
    cons = consistency_loss(
        log_p, log_q, config.divergence, sub.tgt_mask, stop_gradient=config.cons_stop_gradient, flip=config.kl_flip
    )
    loss, breakdown = total_loss(ce_o, ce_a, ctc, cons, ctc_weight=config.ctc_weight, alpha=config.effective_alpha)
    return TabOutput(
        loss=loss,
        log_p=log_p,
        log_q=log_q,
        breakdown=breakdown,
        upsilon=upsilon,
        p_star=p_star,
        branches=branches,
        kept=kept,
        skipped=skipped,
        acc_o=acc_o,
        acc_a=token_accuracy(log_q, sub.tgt_out, sub.tgt_mask),
    )


@torch.no_grad()
def modality_gap_counts(model: StModel, batch: Batch) -> Tuple[int, int, int]:
    """Correct teacher-forced tokens from shrunk speech and from gold text, and the tokens scored."""
    _, kept, shrunk, _, _ = shrink_batch(model, batch, None)
    if not kept:
        return 0, 0, 0
    sub = batch.subset(kept)
    o, o_mask = _pad_rows(shrunk)
    speech_log_p = model.shared.decode(sub.tgt_in, model.shared.encode(o, o_mask, 0.0, None), o_mask, 0.0, None)
    memory, mask = model.encode_text(sub, None)
    text_log_p = model.shared.decode(sub.tgt_in, memory, mask, 0.0, None)
    return (
        token_hits(speech_log_p, sub.tgt_out, sub.tgt_mask),
        token_hits(text_log_p, sub.tgt_out, sub.tgt_mask),
        int(sub.tgt_mask.sum()),
    )


def batch_modality_gap(model: StModel, batch: Batch) -> Tuple[float, float]:
    """Teacher-forced accuracy of the shared transformer fed shrunk speech vs. gold text."""
    speech_hits, text_hits, tokens = modality_gap_counts(model, batch)
    if not tokens:
        return 0.0, 0.0
    return speech_hits / tokens, text_hits / tokens


def modality_gap_accuracy(
    model: StModel, items: Sequence[UtteranceTriple], vocab: ExtendedVocab, batch_size: int = 32
) -> Tuple[float, float]:
    """Token-weighted speech and text accuracies over a whole split."""
    totals = np.zeros(3, dtype=np.int64)
    for group in make_batches(items, batch_size, vocab):
        totals += modality_gap_counts(model, group)
    speech_hits, text_hits, tokens = (int(v) for v in totals)
    return speech_hits / max(tokens, 1), text_hits / max(tokens, 1)


def _transfer(target: nn.Module, source: nn.Module, prefixes: Tuple[str, ...]) -> List[str]:
    own = dict(target.named_parameters())
    moved = []
    for name, tensor in source.named_parameters():
        if not name.startswith(prefixes):
            continue
        if name not in own:
            raise CheckpointError(f"fine-tuning model has no tensor {name}", name)
        if own[name].shape != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {tuple(tensor.shape)} vs {tuple(own[name].shape)}", name
            )
        with torch.no_grad():
            own[name].copy_(tensor)
        moved.append(name)
    expected = [name for name in own if name.startswith(prefixes)]
    missing = sorted(set(expected) - set(moved))
    if missing:
        raise CheckpointError(f"pre-trained model lacks {missing[0]}", missing[0])
    return moved


def init_from_pretrained(model: StModel, asr: AsrModel, mt: MtModel) -> TransferReport:
    """Copy the speech encoder and CTC head from ``asr`` and the shared transformer from ``mt``."""
    report = TransferReport(
        from_asr=_transfer(model, asr, ("speech_encoder.", "ctc.")),
        from_mt=_transfer(model, mt, ("shared.",)),
    )
    logger.info(f"Initialized fine-tuning model from {len(report.from_asr)} ASR and "
                f"{len(report.from_mt)} MT tensors")
    return report
