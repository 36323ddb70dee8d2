"""Tensor substrate helpers on top of torch autograd.

Torch supplies the tensors, the tape and the reverse pass. This module adds
the pieces the rest of the package relies on: a precision switch, a few
shape-checked primitives, the midpoint-preserving linear upsampler, the
central-difference gradient checker and the optimizer/schedule pair.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import torch
import torch.nn.functional as F

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ShapeError(ValueError):
    """Raised when operands of a primitive do not conform."""


@contextlib.contextmanager
def precision(mode: str = "float64") -> Iterator[torch.dtype]:
    """Temporarily switch torch's default floating dtype.

    Modules built inside the block get parameters of that dtype, which is how
    the gradient checks obtain 64-bit models.
    """
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_DTYPES)}")
    previous = torch.get_default_dtype()
    torch.set_default_dtype(_DTYPES[mode])
    try:
        yield _DTYPES[mode]
    finally:
        torch.set_default_dtype(previous)


def dtype_for(mode: str) -> torch.dtype:
    return _DTYPES[mode]


def _check_finite(name: str, out: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise FloatingPointError(f"{name}: non-finite values in output")
    return out


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"add: cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from None
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(f"mul: cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from None
    return a * b


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    return _check_finite("softmax_lastdim", torch.softmax(x, dim=-1))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def layer_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def conv1d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, dilation: int = 1) -> torch.Tensor:
    """Unpadded 1-D convolution over the last axis; x is (batch, C_in, T)."""
    if x.dim() != 3 or weight.dim() != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1d: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}")
    return F.conv1d(x, weight, bias, stride=stride, dilation=dilation)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    shapes = [tuple(t.shape) for t in tensors]
    ref = list(shapes[0])
    axis = dim % len(ref)
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {shapes[0]} and {s} differ off axis {dim}")
    return torch.cat(list(tensors), dim=dim)


def interpolate_linear(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Double the length of ``x`` along ``dim`` by local linear interpolation.

    Each source frame k becomes the pair x_k -/+ slope_k / 4, i.e. the local
    line sampled at half-frame offsets, with a centred slope inside and
    one-sided slopes at the ends. For linear sequences this is exact linear
    interpolation; for any sequence the mean of each output pair is x_k, so
    pair-averaging inverts it.
    """
    x = x.movedim(dim, 0)
    n = x.shape[0]
    if n == 1:
        slope = torch.zeros_like(x)
    else:
        slope = torch.empty_like(x)
        slope[0] = x[1] - x[0]
        slope[-1] = x[-1] - x[-2]
        if n > 2:
            slope[1:-1] = 0.5 * (x[2:] - x[:-2])
    delta = 0.25 * slope
    out = torch.stack([x - delta, x + delta], dim=1).reshape(2 * n, *x.shape[1:])
    return out.movedim(0, dim)


def average_pairs(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Average adjacent non-overlapping pairs along ``dim`` (kernel 2, stride 2)."""
    n = x.shape[dim]
    if n % 2:
        raise ShapeError(f"average_pairs: odd length {n} along dim {dim}")
    x = x.movedim(dim, 0)
    out = 0.5 * (x[0::2] + x[1::2])
    return out.movedim(0, dim)


def finite_difference_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                            eps: float = 1e-5) -> float:
    """Compare autograd against central differences, coordinate by coordinate.

    Returns max_i |g_i - c_i| / max(1, |c_i|) where g is the analytic
    gradient of the scalar ``f`` at ``x`` and c the central difference.
    """
    x0 = x.detach().clone().requires_grad_(True)
    out = f(x0)
    if out.numel() != 1:
        raise ValueError(f"finite_difference_check: f must be scalar, got shape {tuple(out.shape)}")
    if out.requires_grad:
        (grad,) = torch.autograd.grad(out, x0, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(x0)
    else:
        grad = torch.zeros_like(x0)

    flat = x0.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = f(flat.view_as(x0)).item()
            flat[i] = orig - eps
            lo = f(flat.view_as(x0)).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * eps)
    err = (grad.reshape(-1) - numeric).abs() / numeric.abs().clamp_min(1.0)
    return float(err.max()) if err.numel() else 0.0


def parameter_gradient_check(module: torch.nn.Module, loss: Callable[[], torch.Tensor],
                             eps: float = 1e-5) -> float:
    """Central-difference check of d loss / d theta over every trainable parameter.

    ``loss`` is a closure that runs ``module`` and returns a scalar. Same error
    measure as :func:`finite_difference_check`.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    out = loss()
    if out.numel() != 1:
        raise ValueError(f"parameter_gradient_check: loss must be scalar, got {tuple(out.shape)}")
    grads = torch.autograd.grad(out, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = loss().item()
                flat[i] = orig - eps
                lo = loss().item()
                flat[i] = orig
                c = (hi - lo) / (2 * eps)
                worst = max(worst, abs(gflat[i].item() - c) / max(1.0, abs(c)))
    return worst


def make_optimizer(params, lr: float, weight_decay: float = 2e-5,
                   betas: tuple[float, float] = (0.9, 0.999)) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=betas, weight_decay=weight_decay)


def cosine_with_warmup(optimizer: torch.optim.Optimizer, warmup_steps: int,
                       total_steps: int) -> torch.optim.lr_scheduler.LambdaLR:
    """Linear warm-up to the base rate, then cosine decay to zero."""

    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / max(1, warmup_steps)
        progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
