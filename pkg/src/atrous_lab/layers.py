"""Neural building blocks: convolutions, normalization, attention, resizing.

Functional ops take and return :class:`~atrous_lab.tensor.Tensor`; the module
classes hold parameters and delegate to them.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DegenerateBatchError, ShapeError
from .tensor import (
    Precision,
    Tensor,
    _result,
    _same_precision,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    relu,
    sigmoid,
    softmax,
    swapaxes,
    transpose,
)

__all__ = [
    "Parameter", "Module", "Linear", "Conv2d", "ConvTranspose2d", "BatchNorm2d",
    "LayerNorm", "LayerNorm2d", "conv2d", "dilated_conv2d", "transposed_conv2d",
    "conv_transpose2d", "batch_norm", "global_avg_pool", "bilinear_resize",
    "softmax_attention", "relu", "sigmoid", "gelu", "concat",
]


# ---------------------------------------------------------------------------
# parameter containers

class Parameter(Tensor):
    """A tensor owned by a module.  ``requires_grad`` doubles as *trainable*."""

    __slots__ = ()

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)


class Module:
    """Minimal parameter tree.

    Attributes that are :class:`Parameter` are parameters, other tensors are
    buffers (saved in checkpoints, never counted or trained), and attributes
    that are modules or lists of modules are walked recursively.
    """

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _walk(self, prefix: str = "") -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value._walk(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, t in self._walk():
            if isinstance(t, Parameter):
                yield name, t

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.requires_grad or not trainable_only]

    def named_buffers(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self._walk():
            if not isinstance(t, Parameter):
                yield name, t

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._walk()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self._walk())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)


def _uniform(rng: np.random.Generator, shape, bound: float, precision: Precision) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(precision.dtype)


# ---------------------------------------------------------------------------
# convolution kernels

def _out_extent(n: int, k: int, stride: int, padding: int, dilation: int, axis: str) -> int:
    span = n + 2 * padding - dilation * (k - 1) - 1
    if span < 0:
        raise ShapeError(
            f"effective kernel extent {dilation * (k - 1) + 1} exceeds padded input "
            f"extent {n + 2 * padding} along {axis}"
        )
    if span % stride:
        raise ShapeError(
            f"non-integral output extent along {axis}: ({n} + 2*{padding} - "
            f"{dilation}*({k}-1) - 1)/{stride} + 1"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, dilation: int, stride: int, oh: int, ow: int):
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)


def _conv_forward(x, w, stride, padding, dilation):
    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    oh = _out_extent(h, kh, stride, padding, dilation, "H")
    ow = _out_extent(wd, kw, stride, padding, dilation, "W")
    cols = _windows(_pad(x, padding), kh, kw, dilation, stride, oh, ow)
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g, w, in_shape, stride, padding, dilation):
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    b, c, h, wd = in_shape
    kh, kw = w.shape[2:]
    oh, ow = g.shape[2:]
    gcols = np.tensordot(g, w, axes=([1], [0]))  # b, oh, ow, c, kh, kw
    gp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            hs, ws = i * dilation, j * dilation
            gp[:, :, hs:hs + stride * (oh - 1) + 1:stride, ws:ws + stride * (ow - 1) + 1:stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return gp[:, :, padding:padding + h, padding:padding + wd]


def _conv_weight_grad(g, x, kshape, stride, padding, dilation):
    kh, kw = kshape
    oh, ow = g.shape[2:]
    cols = _windows(_pad(x, padding), kh, kw, dilation, stride, oh, ow)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlation of ``x[B,C_in,H,W]`` with ``weight[C_out,C_in,kh,kw]``.

    Taps are spaced ``dilation`` pixels apart.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    _same_precision(*parents)
    xd, wd = x.data, weight.data
    out = _conv_forward(xd, wd, stride, padding, dilation)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        gx = _conv_input_grad(g, wd, xd.shape, stride, padding, dilation)
        gw = _conv_weight_grad(g, xd, wd.shape[2:], stride, padding, dilation)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, vjp)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Transposed convolution; ``weight`` is ``[C_in, C_out, kh, kw]``.

    This is exactly the adjoint of :func:`conv2d` with the same weight, so
    ``<conv2d(z, W), y> == <z, conv_transpose2d(y, W)>``.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: input {x.shape} incompatible with weight {weight.shape}"
        )
    parents = (x, weight) if bias is None else (x, weight, bias)
    _same_precision(*parents)
    xd, wd = x.data, weight.data
    b, _, h, w = xd.shape
    kh, kw = wd.shape[2:]
    oh = (h - 1) * stride - 2 * padding + dilation * (kh - 1) + 1
    ow = (w - 1) * stride - 2 * padding + dilation * (kw - 1) + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {(oh, ow)}")
    out_shape = (b, wd.shape[1], oh, ow)
    out = _conv_input_grad(xd, wd, out_shape, stride, padding, dilation)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def vjp(g):
        gx = _conv_forward(g, wd, stride, padding, dilation)
        gw = _conv_weight_grad(xd, g, (kh, kw), stride, padding, dilation)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, vjp)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of ``x[B,C,H,W]``.

    Training mode normalizes with biased batch statistics and updates the
    running estimates in place (unbiased variance); inference mode uses the
    running estimates.
    """
    _same_precision(x, gamma, beta)
    xd = x.data
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if n < 2:
            raise DegenerateBatchError(
                f"batch norm in training mode needs >= 2 values per channel, got shape {xd.shape}"
            )
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean.data = ((1 - momentum) * running_mean.data + momentum * mu).astype(xd.dtype)
        running_var.data = ((1 - momentum) * running_var.data
                            + momentum * var * (n / (n - 1))).astype(xd.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]

        def vjp(g):
            dxhat = g * g_
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv[None, :, None, None] / n * (n * dxhat - sum_d - xhat * sum_dx)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (xd - running_mean.data[None, :, None, None]) * inv[None, :, None, None]

        def vjp(g):
            gx = g * g_ * inv[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result((xhat * g_ + b_).astype(xd.dtype), (x, gamma, beta), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over each ``H x W`` plane, keeping ``[B,C,1,1]``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


def interp_matrix(n_in: int, n_out: int, precision: Precision = Precision.F64) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=precision.dtype)
    scale = n_in / n_out
    for r in range(n_out):
        src = max((r + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[r, i0] += 1.0 - lam
        m[r, i1] += lam
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``x[B,C,H,W]`` (align-corners=False)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output extent must be >= 1, got {(out_h, out_w)}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    prec = x.precision
    y = x
    if h != out_h:
        y = matmul(Tensor(interp_matrix(h, out_h, prec)), y)
    if w != out_w:
        y = matmul(y, Tensor(interp_matrix(w, out_w, prec).T.copy()))
    return y


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """``softmax(q k^T / sqrt(d)) v`` over ``[B,h,N,d]`` operands."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention shapes inconsistent: q{q.shape} k{k.shape} v{v.shape}")
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# modules

class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 precision: Precision = Precision.F32, frozen: bool = False):
        bound = 1.0 / math.sqrt(c_in)
        self.weight = Parameter(_uniform(rng, (c_out, c_in), bound, precision), not frozen)
        self.bias = (Parameter(_uniform(rng, (c_out,), bound, precision), not frozen)
                     if bias else None)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dilation: int = 1, bias: bool = True,
                 precision: Precision = Precision.F32):
        if dilation < 1 or stride < 1 or padding < 0:
            raise ShapeError(f"bad conv geometry: stride={stride} padding={padding} dilation={dilation}")
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel, kernel), bound, precision))
        self.bias = Parameter(_uniform(rng, (c_out,), bound, precision)) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


def dilated_conv2d(x: Tensor, p: Conv2d) -> Tensor:
    return p(x)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, dilation: int = 1, bias: bool = True,
                 precision: Precision = Precision.F32):
        bound = 1.0 / math.sqrt(c_out * kernel * kernel)
        self.weight = Parameter(_uniform(rng, (c_in, c_out, kernel, kernel), bound, precision))
        self.bias = Parameter(_uniform(rng, (c_out,), bound, precision)) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


def transposed_conv2d(x: Tensor, p: ConvTranspose2d) -> Tensor:
    return p(x)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 precision: Precision = Precision.F32):
        dt = precision.dtype
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self.running_mean = Tensor(np.zeros(channels, dtype=dt))
        self.running_var = Tensor(np.ones(channels, dtype=dt))
        self.eps, self.momentum = eps, momentum

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, precision: Precision = Precision.F32):
        self.gamma = Parameter(np.ones(dim, dtype=precision.dtype))
        self.beta = Parameter(np.zeros(dim, dtype=precision.dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class LayerNorm2d(LayerNorm):
    """Layer norm over the channel axis of ``[B,C,H,W]`` maps."""

    def forward(self, x: Tensor) -> Tensor:
        y = layer_norm(transpose(x, (0, 2, 3, 1)), self.gamma, self.beta, self.eps)
        return transpose(y, (0, 3, 1, 2))
