"""Dense numeric kernels shared by the rest of the library.

All tensors are ``torch.Tensor`` values on CPU; single precision is the
default and double precision is used for gradient verification. Every
function here is pure.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor

# Additive masking constant: masked score pairs receive -MASK_CONSTANT before
# the softmax. Matches the usual BERT convention.
MASK_CONSTANT = 10000.0

_GELU_COEFF = math.sqrt(2.0 / math.pi)


def resolve_dtype(precision: str) -> torch.dtype:
    if precision == "single":
        return torch.float32
    if precision == "double":
        return torch.float64
    raise ValueError(f"unknown precision: {precision!r}")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU, the variant stored in common BERT checkpoints."""
    return 0.5 * x * (1.0 + torch.tanh(_GELU_COEFF * (x + 0.044715 * x.pow(3))))


def masked_softmax(scores: Tensor) -> Tensor:
    """Row softmax over the last dimension with a fully-masked-row guard.

    Masking is assumed to have been applied additively (-MASK_CONSTANT) by
    the caller. Rows whose every entry is <= -MASK_CONSTANT/2 are considered
    fully masked and return all zeros instead of a uniform distribution,
    which keeps padded rows inert.
    """
    if not torch.isfinite(scores).all():
        raise ValueError("non-finite scores")
    if scores.shape[-1] == 0:
        return torch.zeros_like(scores)
    row_max = scores.max(dim=-1, keepdim=True).values
    alive = row_max > (-MASK_CONSTANT / 2.0)
    shifted = torch.exp(scores - row_max)
    out = shifted / shifted.sum(dim=-1, keepdim=True)
    return torch.where(alive, out, torch.zeros_like(out))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then scale.

    Uses the biased variance (divide by d), matching BERT checkpoints.
    """
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ValueError(
            f"layer_norm shape mismatch: x {tuple(x.shape)}, "
            f"gain {tuple(gain.shape)}, bias {tuple(bias.shape)}"
        )
    if eps <= 0:
        raise ValueError("eps must be > 0")
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return gain * (x - mean) / torch.sqrt(var + eps) + bias


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise feed-forward block: ``w2 @ gelu(w1 @ x + b1) + b2``.

    ``x`` is ``[..., d]`` with ``w1`` mapping d -> d_ff and ``w2`` mapping
    d_ff -> d (row-vector convention, ``y = x @ w``).
    """
    d = x.shape[-1]
    if w1.shape[0] != d or w2.shape[1] != d or w1.shape[1] != w2.shape[0]:
        raise ValueError(
            f"feed_forward shape mismatch: x [... ,{d}], w1 {tuple(w1.shape)}, "
            f"w2 {tuple(w2.shape)}"
        )
    return gelu(x @ w1 + b1) @ w2 + b2


def check_finite(x: Tensor, what: str) -> Tensor:
    if not torch.isfinite(x).all():
        raise ValueError(f"non-finite values in {what}")
    return x


def truncated_normal(
    shape: tuple[int, ...],
    std: float,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Truncated normal init (+-2 std), sampled via the inverse-CDF trick."""
    lo = math.erf(-2.0 / math.sqrt(2.0))
    hi = math.erf(2.0 / math.sqrt(2.0))
    u = torch.empty(shape, dtype=torch.float64)
    u.uniform_(lo, hi, generator=generator)
    samples = torch.erfinv(u) * math.sqrt(2.0) * std
    return samples.to(dtype)
