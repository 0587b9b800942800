"""Low-rank adapters with an Atrous Attention bottleneck.

A plain LoRA adapter adds ``W_b W_a x`` to a frozen projection ``W_O x``.  The
AtrousLoRA variant reshapes the rank-``r`` bottleneck activations onto the
patch grid, runs them through an ASPP block gated by a sigmoid attention map,
and only then projects back up with ``W_b``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    BatchNorm2d,
    Conv2d,
    Linear,
    Module,
    Parameter,
    global_avg_pool,
)
from .tensor import (
    Precision,
    Tensor,
    add,
    broadcast_to,
    concat,
    linear,
    mul,
    relu,
    sigmoid,
    transpose,
)

DEFAULT_RATES = (1, 6, 12, 18)


def _check_rank(rank: int, c_in: int, c_out: int) -> None:
    if rank < 1 or rank >= min(c_in, c_out):
        raise ConfigError(
            f"LoRA rank must satisfy 1 <= r < min(C_in, C_out) = {min(c_in, c_out)}, got {rank}"
        )


class LoraAdapter(Module):
    """Trainable low-rank pair ``w_a[r, C_in]``, ``w_b[C_out, r]``.

    ``w_b`` starts at zero so an untrained adapter is an exact no-op.
    """

    def __init__(self, c_in: int, c_out: int, rank: int, rng: np.random.Generator,
                 precision: Precision = Precision.F32):
        _check_rank(rank, c_in, c_out)
        bound = 1.0 / math.sqrt(c_in)
        self.w_a = Parameter(rng.uniform(-bound, bound, (rank, c_in)).astype(precision.dtype))
        self.w_b = Parameter(np.zeros((c_out, rank), dtype=precision.dtype))

    @property
    def rank(self) -> int:
        return self.w_a.shape[0]

    def delta(self, x: Tensor) -> Tensor:
        return linear(linear(x, self.w_a), self.w_b)


def lora_forward(x: Tensor, base: Linear, a: LoraAdapter) -> Tensor:
    """``x W_O^T + (x W_a^T) W_b^T`` for token inputs ``x[B,N,C_in]``."""
    if not base.frozen:
        raise ConfigError("LoRA base projection must be frozen")
    _check_rank(a.rank, base.weight.shape[1], base.weight.shape[0])
    return add(base(x), a.delta(x))


class Identity(Module):
    """Parameter-free frozen base for adapters placed on the residual stream."""

    def __init__(self, dim: int):
        self.dim = dim

    @property
    def frozen(self) -> bool:
        return True

    def forward(self, x: Tensor) -> Tensor:
        return x


def _base_dims(base: Module) -> tuple[int, int]:
    if isinstance(base, Identity):
        return base.dim, base.dim
    c_out, c_in = base.weight.shape
    return c_in, c_out


class ASPP(Module):
    """Parallel dilated 3x3 branches plus a pooled branch, fused by 1x1 conv + BN + ReLU.

    Branch padding equals the dilation rate so every branch keeps ``H x W``.
    """

    def __init__(self, c_in: int, branch_channels: int, c_out: int, rates: Sequence[int],
                 rng: np.random.Generator, precision: Precision = Precision.F32):
        rates = tuple(int(r) for r in rates)
        if not rates or min(rates) < 1:
            raise ConfigError(f"dilation rates must be positive, got {rates}")
        self.rates = rates
        # No conv biases: each feeds batch norm, whose mean subtraction cancels them.
        self.branches = [
            Conv2d(c_in, branch_channels, 3, rng, padding=d, dilation=d, bias=False,
                   precision=precision)
            for d in rates
        ]
        self.pool_proj = Conv2d(c_in, branch_channels, 1, rng, bias=False, precision=precision)
        self.fuse_proj = Conv2d((len(rates) + 1) * branch_channels, c_out, 1, rng, bias=False,
                                precision=precision)
        self.fuse_bn = BatchNorm2d(c_out, precision=precision)

    @property
    def concat_channels(self) -> int:
        return self.fuse_proj.weight.shape[1]

    def concat_features(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        feats = [branch(x) for branch in self.branches]
        pooled = self.pool_proj(global_avg_pool(x))
        feats.append(broadcast_to(pooled, (b, pooled.shape[1], h, w)))
        return concat(feats, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.fuse_bn(self.fuse_proj(self.concat_features(x))))


def aspp_forward(x: Tensor, m: ASPP) -> Tensor:
    return m(x)


class AtrousAttention(Module):
    """ASPP features multiplied by a single-channel sigmoid gate computed from them."""

    def __init__(self, channels: int, rates: Sequence[int], rng: np.random.Generator,
                 precision: Precision = Precision.F32, branch_channels: int | None = None,
                 out_channels: int | None = None):
        branch_channels = branch_channels or channels
        out_channels = out_channels or channels
        self.aspp = ASPP(channels, branch_channels, out_channels, rates, rng, precision)
        self.attn_proj = Conv2d(out_channels, 1, 1, rng, precision=precision)
        self.attn_proj.bias.data[:] = 0

    def gate(self, y_aspp: Tensor) -> Tensor:
        return sigmoid(self.attn_proj(y_aspp))

    def forward(self, x: Tensor) -> Tensor:
        y = self.aspp(x)
        return mul(y, self.gate(y))


def atrous_attention_forward(x: Tensor, m: AtrousAttention) -> Tensor:
    return m(x)


class AtrousLoraAdapter(Module):
    """Frozen projection plus a low-rank update with an Atrous Attention bottleneck.

    ``base`` is a frozen :class:`Linear` or an :class:`Identity`; the latter
    gives a residual adapter ``x + W_b g(W_a x)``.  Token inputs ``[B, N, C_in]`` are projected to ``r`` channels, laid out on
    the ``grid`` of patches, gated by :class:`AtrousAttention` and projected
    back to ``C_out``.  With ``attention=False`` the bottleneck is a
    passthrough and the adapter reduces to plain LoRA.
    """

    def __init__(self, base: Linear | Identity, rank: int, grid: tuple[int, int],
                 rng: np.random.Generator, rates: Sequence[int] = DEFAULT_RATES,
                 precision: Precision = Precision.F32, attention: bool = True):
        c_in, c_out = _base_dims(base)
        _check_rank(rank, c_in, c_out)
        self.base = base.freeze()
        lora = LoraAdapter(c_in, c_out, rank, rng, precision)
        self.w_a, self.w_b = lora.w_a, lora.w_b
        self.grid = tuple(grid)
        self.attention = AtrousAttention(rank, rates, rng, precision) if attention else None

    @property
    def rank(self) -> int:
        return self.w_a.shape[0]

    def to_grid(self, h: Tensor) -> Tensor:
        b, n, r = h.shape
        hp, wp = self.grid
        if n != hp * wp:
            raise ShapeError(f"token count N={n} does not match patch grid H_p={hp} x W_p={wp}")
        return transpose(h, (0, 2, 1)).reshape(b, r, hp, wp)

    def bottleneck(self, h: Tensor) -> Tensor:
        b, n, r = h.shape
        grid = self.to_grid(h)
        if self.attention is None:
            return h
        g = self.attention(grid)
        return transpose(g.reshape(b, r, n), (0, 2, 1))

    def forward(self, x: Tensor) -> Tensor:
        h = linear(x, self.w_a)
        return add(self.base(x), linear(self.bottleneck(h), self.w_b))


def atrous_lora_forward(x: Tensor, a: AtrousLoraAdapter) -> Tensor:
    return a(x)


def count_parameters(model: Module) -> dict:
    """Scalar parameter counts; buffers such as BN running stats are excluded."""
    total = trainable = 0
    for _, p in model.named_parameters():
        total += p.size
        if p.requires_grad:
            trainable += p.size
    return {"total": total, "trainable": trainable,
            "ratio": trainable / total if total else 0.0}
