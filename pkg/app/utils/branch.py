from typing import List, Optional, Tuple

import torch

from app.core.errors import ShapeError
from app.models.alignment import AlignmentPath
from app.models.branch import BranchPair, ReplacePolicy
from app.utils import diffcore


def shrink(h: torch.Tensor, path: AlignmentPath) -> Tuple[torch.Tensor, List[int]]:
    """Average the speech frames of every run; blank runs keep one averaged position."""
    if h.shape[0] != len(path):
        raise ShapeError("shrink", [tuple(h.shape), (len(path),)], "path length differs from frames")
    pooling = h.new_zeros(len(path.runs), h.shape[0])
    for k, run in enumerate(path.runs):
        pooling[k, run.start : run.end + 1] = 1.0 / run.length
    return diffcore.matmul(pooling, h), path.run_labels


def copy_replace(
    o: torch.Tensor,
    labels: List[int],
    embedding: torch.Tensor,
    p_star: float,
    rng: Optional[torch.Generator],
    blank: int,
) -> BranchPair:
    """Copy ``o`` and swap each non-blank position for its label embedding with probability p*.

    ``embedding`` holds one (scaled) row per non-blank source label. The label
    choice itself carries no gradient.
    """
    if not 0.0 <= p_star <= 1.0:
        raise ValueError(f"replacement probability must lie in [0, 1], got {p_star}")
    if o.shape[0] != len(labels):
        raise ShapeError("copy_replace", [tuple(o.shape), (len(labels),)])
    ids = torch.tensor(labels, dtype=torch.long)
    draws = torch.rand(len(labels), generator=rng, dtype=torch.float64)
    mask = (draws < p_star) & (ids != blank)
    if not bool(mask.any()):
        a = o
    else:
        rows = diffcore.embedding(torch.where(ids == blank, torch.zeros_like(ids), ids), embedding)
        a = torch.where(mask.unsqueeze(-1), rows, o)
    return BranchPair(
        o=o,
        a=a,
        labels=list(labels),
        replace_mask=[bool(m) for m in mask],
        p_star_used=float(p_star),
        blank_id=blank,
    )


def resolve_p_star(policy: ReplacePolicy, upsilon: Optional[float] = None) -> float:
    if policy.mode == "fixed":
        return policy.value
    if upsilon is None:
        raise ValueError("dynamic replacement needs the original-branch uncertainty")
    if not 0.0 <= upsilon <= 1.0:
        raise ValueError(f"uncertainty must lie in [0, 1], got {upsilon}")
    return min(max(policy.gamma * upsilon, 0.0), 1.0)
