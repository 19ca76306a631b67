"""Self-checks: finite-difference gradient validation and the brute-force CTC comparison."""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel

from app.models.branch import ReplacePolicy
from app.models.corpus import Batch, UtteranceTriple
from app.models.diff import GradCheckReport
from app.models.losses import DivergenceKind
from app.models.training import ModelConfig, Stage, TrainConfig
from app.services.network import StModel, build_model
from app.services.synthdata import make_batch, make_templates, make_vocab, synthesize_speech, translate_reference
from app.services.tab import TabRngs, forward_tab
from app.utils import diffcore
from app.utils.ctc import ctc_loss, ctc_loss_oracle, min_frames
from app.utils.objectives import ce_label_smoothed, consistency_loss

logger = logging.getLogger(__name__)

GRAD_TARGETS = ["ce", "ctc", "tab"] + [kind.value for kind in DivergenceKind if kind != DivergenceKind.NONE]


class OracleCase(BaseModel):
    frames: int
    labels: List[int]
    vocab: int
    loss: float
    oracle: float

    @property
    def error(self) -> float:
        return abs(self.loss - self.oracle)


class OracleReport(BaseModel):
    cases: List[OracleCase]
    tol: float

    @property
    def max_error(self) -> float:
        return max((c.error for c in self.cases), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _logits(rng: np.random.Generator, *shape: int) -> torch.nn.Parameter:
    return torch.nn.Parameter(torch.from_numpy(rng.normal(size=shape)).to(torch.float64))


def tiny_st_problem(seed: int = 0) -> Tuple[StModel, Batch]:
    """A two-utterance batch and a small fine-tuning model for full-model checks."""
    config = ModelConfig(
        d_feat=4, n_source=5, n_target_vocab=8, d_model=8, speech_layers=1, encoder_layers=1,
        decoder_layers=1, heads=2, ffn_dim=16,
    )
    vocab = make_vocab(5, 5, seed)
    templates = make_templates(5, 4, seed)
    items = []
    for i, x in enumerate([[0, 1, 2], [3, 3]]):
        speech = synthesize_speech(x, templates, 0.3, seed + i, silence_prob=0.0)
        items.append(UtteranceTriple(uid=f"check-{i}", x=x, y=translate_reference(x, vocab), speech=speech))
    return build_model(Stage.ST, config, seed), make_batch(items, vocab)


def _builders(target: str, seed: int) -> Tuple[Callable[[], torch.Tensor], diffcore.ParamSet]:
    rng = np.random.default_rng(seed)
    if target == "ce":
        logits = _logits(rng, 3, 5)
        targets = torch.tensor([0, 4, 2])
        params = diffcore.ParamSet({"logits": logits})
        return lambda: ce_label_smoothed(torch.log_softmax(logits, -1), targets, 0.1), params
    if target == "ctc":
        logits = _logits(rng, 6, 4)
        params = diffcore.ParamSet({"logits": logits})
        return lambda: ctc_loss(torch.log_softmax(logits, -1), [0, 1, 1], blank=3), params
    if target == "tab":
        model, batch = tiny_st_problem(seed)
        train = TrainConfig(stage=Stage.ST, policy=ReplacePolicy(mode="fixed", value=0.5), alpha=1.0)
        return lambda: forward_tab(model, batch, train, TabRngs.for_step(seed, 1, dropout=False)).loss, (
            diffcore.ParamSet.from_module(model)
        )
    kind = DivergenceKind(target)
    p_logits, q_logits = _logits(rng, 3, 5), _logits(rng, 3, 5)
    params = diffcore.ParamSet({"p": p_logits, "q": q_logits})
    return lambda: consistency_loss(torch.log_softmax(p_logits, -1), torch.log_softmax(q_logits, -1), kind), params


def run_grad_checks(
    targets: Optional[Sequence[str]] = None,
    seed: int = 0,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = 4,
) -> Dict[str, GradCheckReport]:
    """Gradient checks in 64-bit precision with dropout frozen."""
    previous = torch.get_default_dtype()
    diffcore.set_precision("float64")
    try:
        reports = {}
        for target in targets or GRAD_TARGETS:
            builder, params = _builders(target, seed)
            reports[target] = diffcore.grad_check(builder, params, eps=eps, tol=tol, max_entries=max_entries, seed=seed)
            logger.info(f"grad check {target}: max rel error {reports[target].max_rel_error:.2e}")
        return reports
    finally:
        torch.set_default_dtype(previous)


def run_ctc_oracle_check(cases: int = 200, seed: int = 0, tol: float = 1e-6) -> OracleReport:
    """Compare the dynamic-programming CTC loss with path enumeration on random feasible instances."""
    rng = np.random.default_rng(seed)
    results = []
    while len(results) < cases:
        vocab = int(rng.integers(2, 5))
        frames = int(rng.integers(1, 7))
        length = int(rng.integers(1, 4))
        labels = [int(t) for t in rng.integers(0, vocab - 1, size=length)]
        if min_frames(labels) > frames:
            continue
        log_probs = torch.log_softmax(torch.from_numpy(rng.normal(size=(frames, vocab))), dim=-1)
        results.append(
            OracleCase(
                frames=frames,
                labels=labels,
                vocab=vocab,
                loss=float(ctc_loss(log_probs, labels, blank=vocab - 1)),
                oracle=ctc_loss_oracle(log_probs, labels, blank=vocab - 1),
            )
        )
    report = OracleReport(cases=results, tol=tol)
    logger.info(f"CTC oracle check over {cases} cases: max error {report.max_error:.2e}")
    return report
