"""Training objectives: smoothed cross-entropy, branch divergences, normalized
entropy and the composite fine-tuning loss."""

import math
from typing import Optional, Tuple, Union

import torch

from app.core.errors import DistributionError, ShapeError
from app.models.losses import DivergenceKind, LossBreakdown

NORMALIZATION_TOL = 1e-6

Number = Union[float, torch.Tensor]


def _check_normalized(log_probs: torch.Tensor, name: str):
    total = torch.logsumexp(log_probs.detach(), dim=-1)
    worst = float(total.abs().max()) if total.numel() else 0.0
    if not worst <= NORMALIZATION_TOL:
        raise DistributionError(f"{name} rows are not normalized (|logsumexp| up to {worst:.2e})")


def _positions_mask(shape: torch.Size, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return torch.ones(shape, dtype=torch.bool)
    if tuple(mask.shape) != tuple(shape):
        raise ShapeError("mask", [tuple(shape), tuple(mask.shape)])
    return mask.bool()


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    weights = mask.to(values.dtype)
    return (values * weights).sum() / weights.sum().clamp_min(1.0)


def ce_label_smoothed(
    log_probs: torch.Tensor,
    targets: torch.Tensor,
    smoothing: float = 0.1,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean over unmasked positions of ``(1-e)*nll(y) + e*mean_w(-log p(w))``."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {smoothing}")
    if tuple(log_probs.shape[:-1]) != tuple(targets.shape):
        raise ShapeError("ce_label_smoothed", [tuple(log_probs.shape), tuple(targets.shape)])
    valid = _positions_mask(targets.shape, mask)
    vocab = log_probs.shape[-1]
    chosen = targets[valid]
    if chosen.numel() and (int(chosen.min()) < 0 or int(chosen.max()) >= vocab):
        raise ValueError(f"target id outside [0, {vocab})")
    safe = torch.where(valid, targets, torch.zeros_like(targets))
    nll = -log_probs.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    uniform = -log_probs.mean(dim=-1)
    per_position = (1.0 - smoothing) * nll + smoothing * uniform
    return _masked_mean(per_position, valid)


def _kl(log_p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    p = log_p.exp()
    gap = torch.where(p > 0, log_p - log_q, torch.zeros_like(log_p))
    return (p * gap).sum(dim=-1)


def divergence(
    log_p: torch.Tensor, log_q: torch.Tensor, kind: DivergenceKind, check: bool = True
) -> torch.Tensor:
    """Per-position divergence between the original (P) and auxiliary (Q) predictions."""
    if log_p.shape != log_q.shape:
        raise ShapeError("divergence", [tuple(log_p.shape), tuple(log_q.shape)])
    if check:
        _check_normalized(log_p, "P")
        _check_normalized(log_q, "Q")
    kind = DivergenceKind(kind)
    if kind == DivergenceKind.NONE:
        return torch.zeros(log_p.shape[:-1], dtype=log_p.dtype)
    if kind == DivergenceKind.KL_ORIG_TO_AUX:
        return _kl(log_p, log_q)
    if kind == DivergenceKind.KL_AUX_TO_ORIG:
        return _kl(log_q, log_p)
    if kind == DivergenceKind.BI_KL:
        return 0.5 * (_kl(log_p, log_q) + _kl(log_q, log_p))
    log_m = torch.logaddexp(log_p, log_q) - math.log(2.0)
    return 0.5 * _kl(log_p, log_m) + 0.5 * _kl(log_q, log_m)


def consistency_loss(
    log_p: torch.Tensor,
    log_q: torch.Tensor,
    kind: DivergenceKind,
    mask: Optional[torch.Tensor] = None,
    stop_gradient: str = "none",
    flip: bool = False,
) -> torch.Tensor:
    """Mean divergence over unmasked target positions.

    ``stop_gradient`` detaches one branch (``orig`` or ``aux``); ``flip`` swaps
    the two directional KL readings.
    """
    if log_p.shape != log_q.shape:
        raise ShapeError("consistency_loss", [tuple(log_p.shape), tuple(log_q.shape)])
    kind = DivergenceKind(kind)
    if kind == DivergenceKind.NONE:
        return torch.zeros((), dtype=log_p.dtype)
    if flip and kind == DivergenceKind.KL_ORIG_TO_AUX:
        kind = DivergenceKind.KL_AUX_TO_ORIG
    elif flip and kind == DivergenceKind.KL_AUX_TO_ORIG:
        kind = DivergenceKind.KL_ORIG_TO_AUX
    if stop_gradient == "orig":
        log_p = log_p.detach()
    elif stop_gradient == "aux":
        log_q = log_q.detach()
    valid = _positions_mask(log_p.shape[:-1], mask)
    return _masked_mean(divergence(log_p, log_q, kind), valid)


def normalized_entropy(
    log_p: torch.Tensor,
    vocab_size: Optional[int] = None,
    mask: Optional[torch.Tensor] = None,
    mode: str = "distribution",
    targets: Optional[torch.Tensor] = None,
) -> float:
    """Mean per-position entropy divided by ``log V``; lies in [0, 1].

    ``mode="gold_token"`` sums ``-P(y_j) log P(y_j)`` over gold tokens instead
    of the full distribution.
    """
    vocab = log_p.shape[-1] if vocab_size is None else vocab_size
    if vocab < 2:
        raise ValueError(f"normalized entropy needs a vocabulary of at least 2, got {vocab}")
    with torch.no_grad():
        valid = _positions_mask(log_p.shape[:-1], mask)
        p = log_p.exp()
        terms = torch.where(p > 0, -p * log_p, torch.zeros_like(p))
        if mode == "gold_token":
            if targets is None:
                raise ValueError("gold-token entropy needs target ids")
            safe = torch.where(valid, targets, torch.zeros_like(targets))
            per_position = terms.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
        else:
            per_position = terms.sum(dim=-1)
        value = float(_masked_mean(per_position, valid)) / math.log(vocab)
    return min(max(value, 0.0), 1.0)


def total_loss(
    ce_o: Number,
    ce_a: Number = 0.0,
    ctc: Number = 0.0,
    cons: Number = 0.0,
    ctc_weight: float = 0.3,
    alpha: float = 1.0,
) -> Tuple[Number, LossBreakdown]:
    """Weighted sum ``ce_o + ce_a + ctc_weight*ctc + alpha*cons`` and its breakdown."""
    if ctc_weight < 0 or alpha < 0:
        raise ValueError(f"loss weights must be non-negative, got ctc_weight={ctc_weight}, alpha={alpha}")
    total = ce_o + ce_a + ctc_weight * ctc
    if alpha:
        total = total + alpha * cons
    # rounding can leave a divergence a few ulps below zero
    parts = {
        name: max(float(value), 0.0)
        for name, value in (("ce_o", ce_o), ("ce_a", ce_a), ("ctc", ctc), ("cons", cons))
    }
    breakdown = LossBreakdown(
        **parts,
        ctc_weight=ctc_weight,
        alpha=alpha,
        total=parts["ce_o"] + parts["ce_a"] + ctc_weight * parts["ctc"] + alpha * parts["cons"],
    )
    return total, breakdown
