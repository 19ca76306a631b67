"""CTC head, loss with analytic forward-backward gradient, brute-force oracle,
best-path extraction and the collapse mapping."""

import itertools
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.config import settings
from app.core.errors import InfeasibleAlignmentError, OracleTooLargeError, ShapeError, VocabError
from app.models.alignment import AlignmentPath, Run
from app.utils import diffcore


def ctc_project(h: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-frame log-distributions over the extended vocabulary."""
    if h.shape[-1] != weight.shape[1]:
        raise ShapeError("ctc_project", [tuple(h.shape), tuple(weight.shape)])
    return diffcore.log_softmax(diffcore.linear(h, weight, bias))


def min_frames(x: Sequence[int]) -> int:
    """Fewest frames any path needs: one per label plus a blank between equal neighbours."""
    repeats = sum(1 for a, b in zip(x, x[1:]) if a == b)
    return len(x) + repeats


def _extend(x: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(x) + 1, blank, dtype=np.int64)
    ext[1::2] = x
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    allowed = np.zeros(len(ext), dtype=bool)
    allowed[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allowed


def _shift(row: np.ndarray, by: int) -> np.ndarray:
    out = np.full_like(row, -np.inf)
    out[by:] = row[:-by]
    return out


def ctc_forward_backward(log_probs: np.ndarray, x: Sequence[int], blank: int) -> Tuple[float, np.ndarray]:
    """Return ``-log p(x | frames)`` and the per-frame label occupancies.

    Pure log-space recursion over the blank-interleaved target.
    """
    T, V = log_probs.shape
    ext = _extend(x, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    lp = log_probs[:, ext]

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        two = np.where(skip, _shift(prev, 2), -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(prev, _shift(prev, 1)), two) + lp[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = lp[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, S - 2]
    skip_back = np.zeros(S, dtype=bool)
    skip_back[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        one = np.full(S, -np.inf)
        one[:-1] = nxt[1:]
        two = np.full(S, -np.inf)
        two[:-2] = nxt[2:]
        two = np.where(skip_back, two, -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(nxt, one), two) + lp[t]

    log_total = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    occupancy = np.zeros((T, V))
    if not np.isfinite(log_total):
        return math.inf, occupancy
    with np.errstate(invalid="ignore"):
        through = np.where(np.isfinite(lp), alpha + beta - lp - log_total, -np.inf)
    for s in range(S):
        occupancy[:, ext[s]] += np.exp(through[:, s])
    return float(-log_total), occupancy


class _CtcLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, x, blank):
        loss, occupancy = ctc_forward_backward(
            log_probs.detach().cpu().double().numpy(), x, blank
        )
        ctx.save_for_backward(torch.from_numpy(occupancy).to(log_probs.dtype))
        return log_probs.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_output):
        (occupancy,) = ctx.saved_tensors
        return -grad_output * occupancy, None, None


def _check_labels(x: Sequence[int], blank: int, size: int):
    for label in x:
        if label == blank:
            raise VocabError(f"transcript contains the blank id {blank}")
        if not 0 <= label < size:
            raise VocabError(f"label {label} outside the extended vocabulary of size {size}")


def ctc_loss(log_probs: torch.Tensor, x: Sequence[int], blank: int) -> torch.Tensor:
    """Negative log-probability of all frame paths collapsing to ``x``.

    ``log_probs`` is a ``T x |V+|`` posterior; the gradient is the negated
    occupancy of every (frame, label) cell.
    """
    if log_probs.dim() != 2:
        raise ShapeError("ctc_loss", [tuple(log_probs.shape)], "expected T x |V+|")
    _check_labels(x, blank, log_probs.shape[1])
    frames = log_probs.shape[0]
    if not x or frames < min_frames(x):
        raise InfeasibleAlignmentError(len(x), frames)
    return _CtcLoss.apply(log_probs, tuple(int(label) for label in x), int(blank))


def ctc_loss_batch(
    log_probs: torch.Tensor, lengths: torch.Tensor, transcripts: List[List[int]], blank: int
) -> torch.Tensor:
    """Mean of per-utterance CTC losses over a padded ``B x T x |V+|`` posterior."""
    losses = [
        ctc_loss(log_probs[b, : int(lengths[b])], transcripts[b], blank)
        for b in range(log_probs.shape[0])
    ]
    return torch.stack(losses).mean()


def ctc_loss_oracle(log_probs, x: Sequence[int], blank: int) -> float:
    """Exact loss by enumerating every length-T path; ``inf`` when none collapses to ``x``."""
    lp = np.asarray(log_probs.detach().cpu().double() if isinstance(log_probs, torch.Tensor) else log_probs)
    T, V = lp.shape
    if V ** T > settings.MAX_ORACLE_PATHS:
        raise OracleTooLargeError(f"{V}^{T} paths exceed the enumeration budget {settings.MAX_ORACLE_PATHS}")
    target = list(x)
    scores = []
    for path in itertools.product(range(V), repeat=T):
        if collapse_beta(path, blank) == target:
            scores.append(lp[np.arange(T), path].sum())
    if not scores:
        return math.inf
    return float(-np.logaddexp.reduce(np.array(scores)))


def runs_of(labels: Sequence[int]) -> List[Run]:
    runs = []
    start = 0
    for label, group in itertools.groupby(labels):
        length = len(list(group))
        runs.append(Run(label=int(label), start=start, end=start + length - 1))
        start += length
    return runs


def greedy_path(log_probs: torch.Tensor) -> AlignmentPath:
    """Per-frame argmax (ties go to the smaller id) grouped into maximal runs."""
    scores = log_probs.detach().cpu().numpy()
    labels = [int(i) for i in np.argmax(scores, axis=-1)] if scores.shape[0] else []
    return AlignmentPath(labels=labels, runs=runs_of(labels))


def collapse_beta(path: Sequence[int], blank: int) -> List[int]:
    """Merge repeated labels, then drop blanks."""
    return [int(label) for label, _ in itertools.groupby(path) if label != blank]


def greedy_transcript(log_probs: torch.Tensor, blank: int, length: Optional[int] = None) -> List[int]:
    if length is not None:
        log_probs = log_probs[:length]
    return collapse_beta(greedy_path(log_probs).labels, blank)
