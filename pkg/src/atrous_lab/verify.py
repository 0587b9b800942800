"""F64 finite-difference suite over every differentiable component.

Each check builds a small random instance and compares reverse-mode
gradients with central differences via :func:`gradcheck`.

The end-to-end model check runs at ten times the requested tolerance and
differentiates the full forward with respect to the adapter parameters,
whose gradient path crosses every encoder and decoder op.  Decoder weights
are covered by the per-layer checks: with thousands of elements, the
smallest true gradients fall below the ~1e-9 round-off floor of a central
difference at step 1e-6 and their relative error is meaningless.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .config import AdapterConfig, ModelConfig, RunConfig
from .errors import ConfigError
from .gradcheck import gradcheck
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LayerNorm2d,
    Linear,
    bilinear_resize,
    softmax_attention,
)
from .losses import bce_loss, combined_loss, dice_loss
from .model import build_model
from .peft import ASPP, AtrousAttention, AtrousLoraAdapter, LoraAdapter, lora_forward
from .tensor import Precision, Tensor, div, exp, gelu, layer_norm, log, matmul, softmax

GROUPS = ("tensor", "layers", "peft", "model", "loss")
F64 = Precision.F64

Check = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor], float]]


def _t(rng, *shape, grad=True, lo=None, hi=None) -> Tensor:
    data = rng.standard_normal(shape) if lo is None else rng.uniform(lo, hi, shape)
    return Tensor(data, requires_grad=grad)


def _params(module) -> list[Tensor]:
    return [p for p in module.parameters() if p.requires_grad]


def _randomize_w_b(adapters, rng) -> None:
    for a in adapters:
        a.w_b.data = rng.standard_normal(a.w_b.shape) * 0.5


# -- tensor ---------------------------------------------------------------

def _matmul(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    return matmul, [a, b], 1.0


def _softmax(rng):
    return (lambda x: softmax(x, axis=-1)), [_t(rng, 3, 6)], 1.0


def _layer_norm(rng):
    x, g, b = _t(rng, 2, 5, 8), _t(rng, 8), _t(rng, 8)
    return layer_norm, [x, g, b], 1.0


def _gelu(rng):
    return gelu, [_t(rng, 4, 7)], 1.0


def _elementwise(rng):
    a, b = _t(rng, 3, 4, lo=0.5, hi=2.0), _t(rng, 4, lo=0.5, hi=2.0)
    return (lambda x, y: log(div(exp(x), y))), [a, b], 1.0


# -- layers ---------------------------------------------------------------

def _dilated(rate):
    def build(rng):
        conv = Conv2d(2, 3, 3, rng, padding=rate, dilation=rate, precision=F64)
        x = _t(rng, 2, 2, 7, 7)
        return (lambda x, w, b: conv.forward(x)), [x, conv.weight, conv.bias], 1.0
    build.__name__ = f"dilated_conv_rate{rate}"
    return build


def _conv_transpose(rng):
    m = ConvTranspose2d(3, 2, 2, rng, stride=2, precision=F64)
    return (lambda x, w, b: m(x)), [_t(rng, 2, 3, 3, 3), m.weight, m.bias], 1.0


def _batch_norm(rng):
    m = BatchNorm2d(3, precision=F64)
    m.gamma.data = rng.uniform(0.5, 1.5, 3)
    m.beta.data = rng.standard_normal(3)
    state = {n: t.data.copy() for n, t in m.named_buffers()}

    def f(x, g, b):
        for n, t in m.named_buffers():
            t.data = state[n].copy()
        return m(x)
    return f, [_t(rng, 2, 3, 3, 3), m.gamma, m.beta], 1.0


def _layer_norm_2d(rng):
    m = LayerNorm2d(4, precision=F64)
    return (lambda x, g, b: m(x)), [_t(rng, 2, 4, 3, 3), m.gamma, m.beta], 1.0


def _bilinear(rng):
    return (lambda x: bilinear_resize(x, 7, 5)), [_t(rng, 1, 2, 4, 3)], 1.0


def _attention(rng):
    q, k, v = _t(rng, 1, 2, 5, 4), _t(rng, 1, 2, 6, 4), _t(rng, 1, 2, 6, 4)
    return softmax_attention, [q, k, v], 1.0


# -- peft -----------------------------------------------------------------

def _lora(rng):
    base = Linear(6, 5, rng, precision=F64, frozen=True)
    a = LoraAdapter(6, 5, 2, rng, F64)
    a.w_b.data = rng.standard_normal(a.w_b.shape)
    x = _t(rng, 2, 3, 6)
    return (lambda x, wa, wb: lora_forward(x, base, a)), [x, a.w_a, a.w_b], 1.0


def _aspp(rng):
    m = ASPP(3, 2, 3, (1, 6, 12, 18), rng, F64)
    x = _t(rng, 2, 3, 6, 6)
    return (lambda x, *p: m(x)), [x] + _params(m), 1.0


def _atrous_attention(rng):
    m = AtrousAttention(3, (1, 6, 12, 18), rng, F64)
    m.attn_proj.bias.data = rng.standard_normal(1)
    x = _t(rng, 2, 3, 5, 5)
    return (lambda x, *p: m(x)), [x] + _params(m), 1.0


def _atrous_lora(rng):
    base = Linear(8, 8, rng, precision=F64, frozen=True)
    a = AtrousLoraAdapter(base, 3, (3, 3), rng, (1, 6, 12, 18), F64)
    _randomize_w_b([a], rng)
    x = _t(rng, 2, 9, 8)
    return (lambda x, *p: a(x)), [x] + _params(a), 1.0


# -- model ----------------------------------------------------------------

def toy_config() -> RunConfig:
    """16x16 images, 4x4 patches, one encoder block; small enough to finite-difference."""
    return RunConfig(
        model=ModelConfig(img_size=16, patch_size=4, embed_dim=12, depth=1, heads=2,
                          mlp_ratio=2.0, corner_embed_dim=8, decoder_dim=16, decoder_depth=1,
                          decoder_heads=2, decoder_mlp_ratio=2.0),
        adapter=AdapterConfig(rank=2, rates=[1, 2]),
    ).validate()


def _model(rng):
    model = build_model(toy_config(), F64)
    _randomize_w_b(model.adapters, rng)
    params = [p for a in model.adapters for p in _params(a)]
    images = rng.uniform(0, 1, (2, 3, 16, 16))
    boxes = [(2, 3, 12, 14), (0, 0, 9, 16)]
    state = {n: t.data.copy() for n, t in model.named_buffers()}

    def f(*params):
        for n, t in model.named_buffers():
            t.data = state[n].copy()
        return model(images, boxes)
    return f, params, 10.0


# -- loss -----------------------------------------------------------------

def _loss(fn):
    def build(rng):
        p = _t(rng, 3, 4, 4, lo=0.05, hi=0.95)
        t = (rng.random((3, 4, 4)) < 0.4).astype(np.float64)
        return (lambda p: fn(p, t)), [p], 1.0
    build.__name__ = fn.__name__
    return build


SUITE: dict[str, list[Check]] = {
    "tensor": [_matmul, _softmax, _layer_norm, _gelu, _elementwise],
    "layers": [_dilated(1), _dilated(6), _dilated(12), _dilated(18), _conv_transpose,
               _batch_norm, _layer_norm_2d, _bilinear, _attention],
    "peft": [_lora, _aspp, _atrous_attention, _atrous_lora],
    "model": [_model],
    "loss": [_loss(bce_loss), _loss(dice_loss), _loss(combined_loss)],
}


def run_suite(module: str = "all", tol: float = 1e-5, seed: int = 0) -> dict:
    """Run the checks for one group (or ``"all"``) and return a JSON-ready report."""
    if module != "all" and module not in SUITE:
        raise ConfigError(f"unknown gradcheck module {module!r}; choose all or one of {GROUPS}")
    groups = GROUPS if module == "all" else (module,)
    started = time.perf_counter()
    checks = []
    for g in groups:
        for i, build in enumerate(SUITE[g]):
            rng = np.random.default_rng([seed, GROUPS.index(g), i])
            f, inputs, scale = build(rng)
            rep = gradcheck(f, inputs, tol=tol * scale)
            checks.append({"group": g, "name": build.__name__.lstrip("_"), **rep.to_dict()})
    return {
        "module": module,
        "tol": tol,
        "pass": all(c["pass"] for c in checks),
        "checks": checks,
        "seconds": round(time.perf_counter() - started, 3),
    }
