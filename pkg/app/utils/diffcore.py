"""Differentiable substrate: named primitives over torch autograd, parameter
collections, checked backward and a finite-difference gradient checker."""

import logging
import math
from collections import OrderedDict
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.core.config import settings
from app.core.errors import GraphError, NondeterministicBuilderError, ShapeError
from app.models.diff import GradCheckReport, ParamCheck

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def set_precision(name: str) -> torch.dtype:
    dtype = DTYPES[name]
    torch.set_default_dtype(dtype)
    return dtype


def make_generator(*entropy: int) -> torch.Generator:
    """Independent, replayable RNG stream derived from integer entropy."""
    seed = int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1, np.uint64)[0])
    generator = torch.Generator()
    generator.manual_seed(seed & 0x7FFF_FFFF_FFFF_FFFF)
    return generator


def _shape(t: torch.Tensor) -> Tuple[int, ...]:
    return tuple(t.shape)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", [_shape(a), _shape(b)])
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # b matches the trailing axes of a; autograd sums its gradient over the leading ones
    if b.dim() > a.dim() or _shape(b) != _shape(a)[a.dim() - b.dim() :]:
        raise ShapeError("add", [_shape(a), _shape(b)])
    return a + b


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", [_shape(x), _shape(weight)])
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear", [_shape(weight), _shape(bias)], "bias")
    return F.linear(x, weight, bias)


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError("embedding", [_shape(ids), _shape(table)], "id out of range")
    return F.embedding(ids, table)


def softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", [_shape(x), _shape(weight), _shape(bias)])
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def dropout(x: torch.Tensor, p: float, rng: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout drawing its mask from ``rng``; identity when ``rng`` is None."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    key_mask: Optional[torch.Tensor] = None,
    causal: bool = False,
    p: float = 0.0,
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Scaled dot-product attention over ``(..., len, d)`` inputs.

    ``key_mask`` is true on valid keys, shaped ``(batch, keys)``.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("masked_attention", [_shape(q), _shape(k), _shape(v)])
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        while key_mask.dim() < scores.dim():
            key_mask = key_mask.unsqueeze(-2)
        scores = scores.masked_fill(~key_mask, float("-inf"))
    if causal:
        n_q, n_k = scores.shape[-2], scores.shape[-1]
        future = torch.ones(n_q, n_k, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    weights = dropout(weights, p, rng)
    return weights @ v


def mean(x: torch.Tensor, axis: int = 0, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    if mask is None:
        return x.mean(dim=axis)
    if mask.shape != x.shape[: mask.dim()]:
        raise ShapeError("mean", [_shape(x), _shape(mask)], "mask")
    weights = mask.to(x.dtype)
    while weights.dim() < x.dim():
        weights = weights.unsqueeze(-1)
    return (x * weights).sum(dim=axis) / weights.sum(dim=axis).clamp_min(1.0)


PRIMITIVES: Dict[str, Callable[..., torch.Tensor]] = {
    "matmul": matmul,
    "add": add,
    "linear": linear,
    "embedding": embedding,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "dropout": dropout,
    "masked_attention": masked_attention,
    "mean": mean,
}


def primitive_forward(kind: str, *inputs: torch.Tensor, **attrs) -> torch.Tensor:
    """Run a named primitive; the result joins the autograd graph of its inputs."""
    try:
        op = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}")
    return op(*inputs, **attrs)


class ParamSet:
    """Named trainable tensors, each paired with a gradient buffer of the same shape."""

    def __init__(self, params: "OrderedDict[str, nn.Parameter]", seed: Optional[int] = None):
        self._params = params
        self.seed = seed

    @classmethod
    def from_module(cls, module: nn.Module, seed: Optional[int] = None) -> "ParamSet":
        params = OrderedDict((name, p) for name, p in module.named_parameters() if p.requires_grad)
        return cls(params, seed)

    def __iter__(self) -> Iterator[Tuple[str, nn.Parameter]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    @property
    def names(self) -> List[str]:
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def grad(self, name: str) -> torch.Tensor:
        p = self._params[name]
        return p.grad if p.grad is not None else torch.zeros_like(p)

    def grads(self) -> Dict[str, torch.Tensor]:
        return {name: self.grad(name) for name in self._params}


def graph_size(root: torch.Tensor) -> int:
    """Number of distinct autograd nodes reachable from ``root``."""
    seen = set()
    stack = [root.grad_fn] if root.grad_fn is not None else []
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        seen.add(node)
        stack.extend(next_fn for next_fn, _ in node.next_functions)
    return len(seen)


def backward(loss: torch.Tensor, params: ParamSet) -> ParamSet:
    """Fill every parameter gradient with d(loss)/d(param); unused parameters get zeros."""
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        shape = tuple(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise GraphError(f"backward needs a scalar loss node, got shape {shape}")
    if not loss.requires_grad:
        raise GraphError("loss has no recorded graph; run the forward pass with tracked parameters first")
    params.zero_grad()
    tracked = [p for _, p in params]
    grads = torch.autograd.grad(loss, tracked, allow_unused=True)
    for p, g in zip(tracked, grads):
        p.grad = torch.zeros_like(p) if g is None else g.detach()
    return params


def grad_check(
    builder: Callable[[], torch.Tensor],
    params: ParamSet,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    names: Optional[Sequence[str]] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``builder`` must rebuild the loss from scratch with frozen randomness.
    ``max_entries`` samples that many entries per parameter instead of all.
    """
    with torch.no_grad():
        first = float(builder())
        second = float(builder())
    if first != second:
        raise NondeterministicBuilderError(first, second)

    loss = builder()
    backward(loss, params)
    picker = np.random.default_rng(seed)
    checks = []
    for name, p in params:
        if names is not None and name not in names:
            continue
        analytic = params.grad(name).reshape(-1)
        flat = p.data.view(-1)
        indices = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            indices = np.sort(picker.choice(flat.numel(), size=max_entries, replace=False))
        max_rel = 0.0
        max_abs = 0.0
        for i in indices:
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + eps
                plus = float(builder())
                flat[i] = original - eps
                minus = float(builder())
                flat[i] = original
            numeric = (plus - minus) / (2.0 * eps)
            a = float(analytic[i])
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), settings.GRAD_CHECK_REL_FLOOR)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
        checks.append(
            ParamCheck(
                name=name,
                shape=list(p.shape),
                entries_checked=len(indices),
                max_rel_error=max_rel,
                max_abs_error=max_abs,
            )
        )
    report = GradCheckReport(eps=eps, tol=tol, loss=float(loss), params=checks)
    report.passed = all(c.max_rel_error < tol for c in checks)
    if not report.passed:
        worst = max(checks, key=lambda c: c.max_rel_error)
        logger.warning(f"grad check failed: {worst.name} rel error {worst.max_rel_error:.3e}")
    return report
