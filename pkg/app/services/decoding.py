"""Greedy and beam-search decoding plus the dev-set scores used for model selection."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from app.models.corpus import Batch, ExtendedVocab, UtteranceTriple
from app.services.network import AsrModel, MtModel
from app.services.synthdata import batch as make_batches
from app.utils.bleu import corpus_bleu
from app.utils.branch import shrink
from app.utils.ctc import greedy_path, greedy_transcript
from app.utils.objectives import ce_label_smoothed

logger = logging.getLogger(__name__)


@dataclass
class Hypothesis:
    tokens: List[int]
    score: float
    truncated: bool = False

    @property
    def normalized(self) -> float:
        # length counts the closing eos
        return self.score / (len(self.tokens) + 1)


@torch.no_grad()
def encode_source(model: nn.Module, batch: Batch) -> Tuple[torch.Tensor, torch.Tensor]:
    """Memory fed to the decoder: shrunk speech for ST, embedded text for MT."""
    if isinstance(model, MtModel):
        return model.encode(batch, None)
    h, lengths = model.encode_speech(batch, None)
    log_probs = model.ctc(h)
    rows = []
    for b in range(len(batch)):
        frames = int(lengths[b])
        o, _ = shrink(h[b, :frames], greedy_path(log_probs[b, :frames]))
        rows.append(o)
    o = torch.nn.utils.rnn.pad_sequence(rows, batch_first=True)
    mask = torch.arange(o.shape[1]).unsqueeze(0) < torch.tensor([r.shape[0] for r in rows]).unsqueeze(1)
    return model.shared.encode(o, mask, 0.0, None), mask


def _next_log_probs(model: nn.Module, prefixes: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor) -> np.ndarray:
    log_probs = model.shared.decode(prefixes, memory, mask, 0.0, None)
    return log_probs[:, -1].cpu().numpy()


@torch.no_grad()
def greedy_decode(model: nn.Module, batch: Batch, vocab: ExtendedVocab, max_len: int = 20) -> List[Hypothesis]:
    """Pick the most probable token at every step (ties go to the smaller id)."""
    memory, mask = encode_source(model, batch)
    size = len(batch)
    prefixes = torch.full((size, 1), vocab.bos_id, dtype=torch.long)
    tokens: List[List[int]] = [[] for _ in range(size)]
    scores = np.zeros(size)
    done = np.zeros(size, dtype=bool)
    for _ in range(max_len):
        step = _next_log_probs(model, prefixes, memory, mask)
        chosen = np.argmax(step, axis=-1)
        for b in range(size):
            if done[b]:
                continue
            scores[b] += step[b, chosen[b]]
            if chosen[b] == vocab.eos_id:
                done[b] = True
            else:
                tokens[b].append(int(chosen[b]))
        if done.all():
            break
        next_ids = torch.tensor(np.where(done, vocab.pad_id, chosen), dtype=torch.long).unsqueeze(1)
        prefixes = torch.cat([prefixes, next_ids], dim=1)
    return [Hypothesis(tokens=tokens[b], score=float(scores[b]), truncated=not done[b]) for b in range(size)]


def _beam_one(
    model: nn.Module, memory: torch.Tensor, mask: torch.Tensor, vocab: ExtendedVocab, beam: int, max_len: int
) -> Hypothesis:
    live: List[Tuple[List[int], float]] = [([], 0.0)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        prefixes = torch.tensor([[vocab.bos_id] + tokens for tokens, _ in live], dtype=torch.long)
        step = _next_log_probs(
            model, prefixes, memory.expand(len(live), -1, -1), mask.expand(len(live), -1)
        )
        candidates = (np.array([score for _, score in live])[:, None] + step).ravel()
        order = np.argsort(-candidates, kind="stable")[:beam]
        survivors = []
        for flat in order:
            parent, token = divmod(int(flat), step.shape[1])
            tokens, score = live[parent][0], float(candidates[flat])
            if token == vocab.eos_id:
                finished.append(Hypothesis(tokens=list(tokens), score=score))
            else:
                survivors.append((tokens + [token], score))
        live = survivors
        if not live or len(finished) >= beam:
            break
    else:
        # only the length limit closes open prefixes; an early stop drops them
        finished.extend(Hypothesis(tokens=tokens, score=score, truncated=True) for tokens, score in live)
    best = max(range(len(finished)), key=lambda i: (finished[i].normalized, -i))
    return finished[best]


@torch.no_grad()
def beam_decode(
    model: nn.Module, batch: Batch, vocab: ExtendedVocab, beam: int = 5, max_len: int = 20
) -> List[Hypothesis]:
    """Length-normalized beam search, one utterance at a time.

    Hypotheses still open after ``max_len`` steps are closed with eos and
    flagged ``truncated``.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    memory, mask = encode_source(model, batch)
    return [_beam_one(model, memory[b : b + 1], mask[b : b + 1], vocab, beam, max_len) for b in range(len(batch))]


def translate(
    model: nn.Module,
    items: Sequence[UtteranceTriple],
    vocab: ExtendedVocab,
    beam: int = 1,
    max_len: int = 20,
    batch_size: int = 32,
) -> List[Hypothesis]:
    out: List[Hypothesis] = []
    for group in make_batches(items, batch_size, vocab):
        if beam == 1:
            out.extend(greedy_decode(model, group, vocab, max_len))
        else:
            out.extend(beam_decode(model, group, vocab, beam, max_len))
    truncated = sum(h.truncated for h in out)
    if truncated:
        logger.warning(f"{truncated} of {len(out)} hypotheses hit the length limit {max_len}")
    return out


def bleu_of(
    model: nn.Module,
    items: Sequence[UtteranceTriple],
    vocab: ExtendedVocab,
    beam: int = 1,
    max_len: int = 20,
    batch_size: int = 32,
    smooth: bool = False,
) -> float:
    hypotheses = translate(model, items, vocab, beam, max_len, batch_size)
    return corpus_bleu([h.tokens for h in hypotheses], [item.y for item in items], smooth=smooth)


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    row = np.arange(len(b) + 1)
    for i, token in enumerate(a, start=1):
        previous = row.copy()
        row[0] = i
        for j, other in enumerate(b, start=1):
            row[j] = min(previous[j] + 1, row[j - 1] + 1, previous[j - 1] + (token != other))
    return int(row[-1])


@torch.no_grad()
def asr_token_error_rate(model: AsrModel, items: Sequence[UtteranceTriple], vocab: ExtendedVocab, batch_size: int = 32) -> float:
    """Edit distance of greedy CTC transcripts over total reference length."""
    errors, total = 0, 0
    for group in make_batches(items, batch_size, vocab):
        log_probs, lengths = model(group, None)
        for b, reference in enumerate(group.transcripts):
            hypothesis = greedy_transcript(log_probs[b], vocab.blank_id, int(lengths[b]))
            errors += edit_distance(hypothesis, reference)
            total += len(reference)
    return errors / max(total, 1)


@torch.no_grad()
def teacher_forced_accuracy(model: MtModel, items: Sequence[UtteranceTriple], vocab: ExtendedVocab, batch_size: int = 32) -> float:
    hits, total = 0, 0
    for group in make_batches(items, batch_size, vocab):
        predicted = model(group, None).argmax(dim=-1)
        hits += int(((predicted == group.tgt_out) & group.tgt_mask).sum())
        total += int(group.tgt_mask.sum())
    return hits / max(total, 1)


@torch.no_grad()
def dev_loss(model: nn.Module, items: Sequence[UtteranceTriple], vocab: ExtendedVocab, batch_size: int = 32,
             label_smoothing: float = 0.0) -> float:
    """Mean per-batch loss without dropout: CTC for ASR, cross-entropy for MT."""
    losses: List[float] = []
    for group in make_batches(items, batch_size, vocab):
        if isinstance(model, AsrModel):
            losses.append(float(model.loss(group, None)))
        else:
            losses.append(float(ce_label_smoothed(model(group, None), group.tgt_out, label_smoothing, group.tgt_mask)))
    return float(np.mean(losses)) if losses else float("nan")
