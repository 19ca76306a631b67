import math
from typing import Optional

import torch

from app.core.errors import NonFiniteGradientError
from app.utils.diffcore import ParamSet


def lr_at(step: int, peak: float, warmup: int, schedule: str = "inverse_sqrt") -> float:
    """Linear warmup to ``peak`` at ``warmup``, then inverse-square-root decay
    (or a constant rate when ``schedule == "constant"``)."""
    if step < 1:
        raise ValueError(f"learning-rate steps start at 1, got {step}")
    if step <= warmup:
        return peak * step / warmup
    if schedule == "constant":
        return peak
    return peak * math.sqrt(warmup / step)


def make_adam(params: ParamSet, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam([p for _, p in params], lr=0.0, betas=(beta1, beta2), eps=eps)


def adam_step(optimizer: torch.optim.Adam, params: ParamSet, lr: float, step: Optional[int] = None):
    """Apply one bias-corrected Adam update; refuses to move on a non-finite gradient."""
    bad = [name for name, p in params if p.grad is not None and not bool(torch.isfinite(p.grad).all())]
    if bad:
        raise NonFiniteGradientError(step if step is not None else -1, bad)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()

