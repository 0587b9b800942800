import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atrous_lab.errors import ConfigError, ShapeError
from atrous_lab.gradcheck import gradcheck
from atrous_lab.layers import Linear, global_avg_pool
from atrous_lab.peft import (
    ASPP,
    AtrousAttention,
    AtrousLoraAdapter,
    Identity,
    LoraAdapter,
    aspp_forward,
    atrous_attention_forward,
    atrous_lora_forward,
    count_parameters,
    lora_forward,
)
from atrous_lab.tensor import Precision, Tape, Tensor, backward, tsum

from oracles import dense_lora

F64 = Precision.F64
RATES = (1, 6, 12, 18)


def np_conv(x, w, dilation=1, padding=0):
    """Zero-padded cross-correlation via explicit tap accumulation."""
    b, c, h, wd = x.shape
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, w.shape[0], h + 2 * padding - dilation * (k - 1), wd + 2 * padding - dilation * (k - 1)))
    for p in range(k):
        for q in range(k):
            patch = xp[:, :, p * dilation:p * dilation + out.shape[2], q * dilation:q * dilation + out.shape[3]]
            out += np.einsum("bchw,oc->bohw", patch, w[:, :, p, q])
    return out


def np_bn_train(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma[None, :, None, None] + beta[None, :, None, None]


def algorithm_oracle(x, m: AtrousAttention):
    """Atrous attention written line by line in numpy (training-mode BN)."""
    a = m.aspp
    ys = [np_conv(x, br.weight.data, d, d) for br, d in zip(a.branches, a.rates)]
    z = np_conv(x.mean(axis=(2, 3), keepdims=True), a.pool_proj.weight.data)
    ys.append(np.broadcast_to(z, ys[0].shape))
    y_concat = np.concatenate(ys, axis=1)
    y = np.maximum(np_bn_train(np_conv(y_concat, a.fuse_proj.weight.data),
                               a.fuse_bn.gamma.data, a.fuse_bn.beta.data), 0)
    att = np_conv(y, m.attn_proj.weight.data) + m.attn_proj.bias.data[None, :, None, None]
    return y * (1 / (1 + np.exp(-att)))


# -- LoRA -----------------------------------------------------------------

def test_lora_zero_update_bit_identical(rng):
    base = Linear(8, 6, rng, precision=F64, frozen=True)
    a = LoraAdapter(8, 6, 2, rng, F64)
    x = Tensor(rng.standard_normal((2, 5, 8)))
    assert np.array_equal(lora_forward(x, base, a).data, base(x).data)


def test_lora_parameter_count(rng):
    a = LoraAdapter(64, 64, 4, rng)
    assert count_parameters(a)["trainable"] == 4 * (64 + 64) == 512


def test_lora_matches_dense_oracle(rng):
    base = Linear(7, 5, rng, precision=F64, frozen=True)
    a = LoraAdapter(7, 5, 3, rng, F64)
    a.w_b.data = rng.standard_normal((5, 3))
    x = rng.standard_normal((2, 4, 7))
    ref = dense_lora(x, base.weight.data, base.bias.data, a.w_a.data, a.w_b.data)
    np.testing.assert_allclose(lora_forward(Tensor(x), base, a).data, ref, atol=1e-6)


@pytest.mark.parametrize("rank", [0, 5, 8])
def test_lora_rank_bounds(rng, rank):
    with pytest.raises(ConfigError):
        LoraAdapter(8, 5, rank, rng)


def test_lora_requires_frozen_base(rng):
    with pytest.raises(ConfigError):
        lora_forward(Tensor(np.zeros((1, 1, 4))), Linear(4, 4, rng), LoraAdapter(4, 4, 2, rng))


def test_lora_grads_only_reach_adapter(rng):
    base = Linear(6, 6, rng, precision=F64, frozen=True)
    a = LoraAdapter(6, 6, 2, rng, F64)
    with Tape():
        backward(tsum(lora_forward(Tensor(rng.standard_normal((2, 3, 6))), base, a)))
    assert base.weight.grad is None and base.bias.grad is None
    assert a.w_b.grad is not None and np.any(a.w_b.grad != 0)


# -- ASPP -----------------------------------------------------------------

def test_aspp_concat_channels(rng):
    m = ASPP(3, 8, 8, RATES, rng, F64)
    assert m.concat_features(Tensor(rng.standard_normal((1, 3, 5, 5)))).shape == (1, 40, 5, 5)
    assert m.concat_channels == (4 + 1) * 8


def test_aspp_zero_weights_give_zero(rng):
    m = ASPP(3, 4, 4, RATES, rng, F64)
    for p in m.parameters():
        if p is not m.fuse_bn.gamma:
            p.data[...] = 0
    out = aspp_forward(Tensor(rng.standard_normal((2, 3, 4, 4))), m).data
    assert np.array_equal(out, np.zeros_like(out))


def test_aspp_single_rate_reduces_to_conv_bn_relu(rng):
    m = ASPP(3, 4, 4, (1,), rng, F64)
    m.fuse_proj.weight.data[:] = 0
    m.fuse_proj.weight.data[:, :4, 0, 0] = np.eye(4)   # keep the conv branch, drop the pooled one
    x = rng.standard_normal((2, 3, 5, 5))
    ref = np.maximum(np_bn_train(np_conv(x, m.branches[0].weight.data, 1, 1),
                                 m.fuse_bn.gamma.data, m.fuse_bn.beta.data), 0)
    np.testing.assert_allclose(m(Tensor(x)).data, ref, atol=1e-6)


@settings(max_examples=20)
@given(h=st.integers(1, 7), w=st.integers(1, 7), seed=st.integers(0, 2**31))
def test_aspp_preserves_extent_and_is_nonnegative(h, w, seed):
    r = np.random.default_rng(seed)
    m = ASPP(2, 3, 3, RATES, r, F64)
    x = Tensor(r.standard_normal((2, 2, h, w)))
    out = m(x).data
    assert out.shape == (2, 3, h, w) and np.all(out >= 0)


def test_pooled_branch_is_projected_gap(rng):
    m = ASPP(3, 2, 2, (1,), rng, F64)
    x = rng.standard_normal((1, 3, 4, 4))
    feats = m.concat_features(Tensor(x)).data
    z = m.pool_proj(global_avg_pool(Tensor(x))).data
    np.testing.assert_array_equal(feats[:, 2:], np.broadcast_to(z, (1, 2, 4, 4)))


# -- Atrous attention ------------------------------------------------------

def test_zero_gate_weights_halve_aspp(rng):
    m = AtrousAttention(3, RATES, rng, F64)
    m.attn_proj.weight.data[:] = 0
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    y = m.aspp(x).data
    np.testing.assert_array_equal(atrous_attention_forward(x, m).data, 0.5 * y)


def test_zero_aspp_output_gives_zero(rng):
    m = AtrousAttention(3, RATES, rng, F64)
    m.aspp.fuse_bn.gamma.data[:] = 0
    out = m(Tensor(rng.standard_normal((2, 3, 4, 4)))).data
    assert np.array_equal(out, np.zeros_like(out))


def test_attn_bias_initialised_to_zero(rng):
    assert np.all(AtrousAttention(4, RATES, rng).attn_proj.bias.data == 0)


def test_matches_algorithm_oracle(rng):
    m = AtrousAttention(3, RATES, rng, F64)
    m.attn_proj.bias.data[:] = 0.3
    m.aspp.fuse_bn.beta.data = rng.standard_normal(3)
    x = rng.standard_normal((2, 3, 6, 5))
    np.testing.assert_allclose(m(Tensor(x)).data, algorithm_oracle(x, m), atol=1e-6)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**31))
def test_gate_bounded_and_output_shrinks(seed):
    r = np.random.default_rng(seed)
    m = AtrousAttention(3, RATES, r, F64)
    x = Tensor(r.standard_normal((2, 3, 4, 4)) * 3)
    y = m.aspp(x)
    gate = m.gate(y).data
    assert np.all((gate > 0) & (gate < 1))
    out = m(x).data
    assert np.all(np.abs(out) <= np.abs(y.data))
    assert out.shape[1] == 3


# -- AtrousLoRA ------------------------------------------------------------

def _atrous_lora(rng, c=8, r=3, grid=(3, 3), rates=RATES, attention=True):
    base = Linear(c, c, rng, precision=F64, frozen=True)
    return base, AtrousLoraAdapter(base, r, grid, rng, rates, F64, attention=attention)


def test_atrous_lora_zero_update(rng):
    base, a = _atrous_lora(rng)
    x = Tensor(rng.standard_normal((2, 9, 8)))
    assert np.array_equal(atrous_lora_forward(x, a).data, base(x).data)


def test_atrous_lora_closed_form_identity_configuration(rng):
    base, a = _atrous_lora(rng, r=3, rates=(1,))
    a.w_b.data = rng.standard_normal(a.w_b.shape)
    att = a.attention
    att.attn_proj.weight.data[:] = 0
    br = att.aspp.branches[0].weight.data
    br[:] = 0
    br[:, :, 1, 1] = np.eye(3)          # rate-1 branch is the identity
    att.aspp.pool_proj.weight.data[:] = 0
    fw = att.aspp.fuse_proj.weight.data
    fw[:] = 0
    fw[:, :3, 0, 0] = np.eye(3)
    att.aspp.eval()                      # running stats 0/1: BN is x / sqrt(1 + eps)
    x = rng.standard_normal((2, 9, 8))
    h = x @ a.w_a.data.T
    g = 0.5 * np.maximum(h / np.sqrt(1 + 1e-5), 0)
    ref = base(Tensor(x)).data + g @ a.w_b.data.T
    np.testing.assert_allclose(a(Tensor(x)).data, ref, atol=1e-6)


def test_atrous_lora_gradcheck_and_frozen_base(rng):
    base, a = _atrous_lora(rng)
    a.w_b.data = rng.standard_normal(a.w_b.shape) * 0.5
    params = [p for p in a.parameters() if p.requires_grad]
    x = Tensor(rng.standard_normal((2, 9, 8)), requires_grad=True)
    assert gradcheck(lambda x, *p: a(x), [x] + params, tol=1e-5).passed
    with Tape():
        backward(tsum(a(x)))
    assert base.weight.grad is None and base.bias.grad is None
    assert all(not p.requires_grad for p in base.parameters())


def test_atrous_lora_grid_mismatch_names_extents(rng):
    _, a = _atrous_lora(rng, grid=(3, 3))
    a.w_b.data[:] = 1
    with pytest.raises(ShapeError, match=r"N=8.*H_p=3.*W_p=3"):
        a(Tensor(rng.standard_normal((1, 8, 8))))


def test_without_attention_is_plain_lora(rng):
    base, a = _atrous_lora(rng, attention=False)
    a.w_b.data = rng.standard_normal(a.w_b.shape)
    x = rng.standard_normal((2, 9, 8))
    ref = base(Tensor(x)).data + (x @ a.w_a.data.T) @ a.w_b.data.T
    np.testing.assert_allclose(a(Tensor(x)).data, ref, atol=1e-12)


def test_identity_base_is_residual_adapter(rng):
    a = AtrousLoraAdapter(Identity(8), 2, (2, 2), rng, (1, 2), F64, attention=False)
    a.w_b.data = rng.standard_normal(a.w_b.shape)
    x = rng.standard_normal((1, 4, 8))
    np.testing.assert_allclose(a(Tensor(x)).data, x + (x @ a.w_a.data.T) @ a.w_b.data.T, atol=1e-12)


# -- accounting -----------------------------------------------------------

def test_count_parameters_frozen_and_rank_doubling(rng):
    base, a = _atrous_lora(rng, c=16, r=4, attention=False)
    assert count_parameters(base) == {"total": 16 * 16 + 16, "trainable": 0, "ratio": 0.0}
    _, a8 = _atrous_lora(rng, c=16, r=8, attention=False)
    lora = lambda m: m.w_a.size + m.w_b.size
    assert lora(a8) == 2 * lora(a) == 2 * 4 * (16 + 16)


def test_atrous_attention_parameter_enumeration(rng):
    r, k = 4, len(RATES)
    m = AtrousAttention(r, RATES, rng)
    expected = k * r * r * 9 + r * r + (k + 1) * r * r + 2 * r + r + 1
    assert count_parameters(m)["total"] == expected
