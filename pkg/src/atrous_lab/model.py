"""Mini promptable segmentation model.

A frozen patch-embedding ViT encoder (optionally carrying AtrousLoRA adapters
on its attention projections), a frozen box prompt encoder and a trainable
two-way-attention mask decoder with transposed-conv upsampling.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .boxes import BBoxPrompt
from .config import ModelConfig, RunConfig
from .errors import ConfigError, ShapeError
from .layers import (
    ConvTranspose2d,
    LayerNorm,
    LayerNorm2d,
    Linear,
    Module,
    Parameter,
    bilinear_resize,
    softmax_attention,
)
from .peft import AtrousLoraAdapter, Identity
from .tensor import (
    Precision,
    Tensor,
    add,
    broadcast_to,
    concat,
    gelu,
    matmul,
    relu,
    reshape,
    sigmoid,
    transpose,
)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return transpose(reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, n, d = t.shape
    return reshape(transpose(t, (0, 2, 1, 3)), (b, n, h * d))


# ---------------------------------------------------------------------------
# image encoder

class EncoderAttention(Module):
    def __init__(self, dim: int, heads: int, rng, precision: Precision):
        self.q = Linear(dim, dim, rng, precision=precision, frozen=True)
        self.k = Linear(dim, dim, rng, precision=precision, frozen=True)
        self.v = Linear(dim, dim, rng, precision=precision, frozen=True)
        self.proj = Linear(dim, dim, rng, precision=precision, frozen=True)
        self.heads = heads

    def forward(self, x: Tensor) -> Tensor:
        h = self.heads
        out = softmax_attention(_split_heads(self.q(x), h), _split_heads(self.k(x), h),
                                _split_heads(self.v(x), h))
        return self.proj(_merge_heads(out))


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng, precision: Precision):
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim, precision=precision)
        self.attn = EncoderAttention(dim, heads, rng, precision)
        self.norm2 = LayerNorm(dim, precision=precision)
        self.fc1 = Linear(dim, hidden, rng, precision=precision, frozen=True)
        self.fc2 = Linear(hidden, dim, rng, precision=precision, frozen=True)
        self.adapter: AtrousLoraAdapter | None = None

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.norm1(x)))
        x = add(x, self.fc2(gelu(self.fc1(self.norm2(x)))))
        return x if self.adapter is None else self.adapter(x)


class ImageEncoder(Module):
    """Patchify, add positional embeddings, run transformer blocks, then a neck.

    The neck projects tokens to the decoder width, as the encoder neck does
    in SAM.  Every parameter here is frozen; adapters are attached afterwards
    by :func:`attach_adapters`.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 precision: Precision = Precision.F32):
        p, d = cfg.patch_size, cfg.embed_dim
        self.cfg = cfg
        self.patch_embed = Linear(3 * p * p, d, rng, precision=precision, frozen=True)
        self.pos_embed = Parameter(
            (0.02 * rng.standard_normal((cfg.num_tokens, d))).astype(precision.dtype), trainable=False
        )
        self.blocks = [EncoderBlock(d, cfg.heads, cfg.mlp_ratio, rng, precision)
                       for _ in range(cfg.depth)]
        self.neck = Linear(d, cfg.decoder_dim, rng, precision=precision, frozen=True)
        self.neck_norm = LayerNorm(cfg.decoder_dim, precision=precision)
        self.freeze()

    def patchify(self, images: Tensor) -> Tensor:
        b, c, s, s2 = images.shape
        p, g = self.cfg.patch_size, self.cfg.grid
        if c != 3 or s != self.cfg.img_size or s2 != s:
            raise ShapeError(f"expected images [B,3,{self.cfg.img_size},{self.cfg.img_size}], got {images.shape}")
        t = reshape(images, (b, c, g, p, g, p))
        t = transpose(t, (0, 2, 4, 1, 3, 5))
        return reshape(t, (b, g * g, c * p * p))

    def forward(self, images: Tensor) -> Tensor:
        x = add(self.patch_embed(self.patchify(images)), self.pos_embed)
        for blk in self.blocks:
            x = blk(x)
        return self.neck_norm(self.neck(x))

    def adapters(self) -> list[AtrousLoraAdapter]:
        return [m for m in self.modules() if isinstance(m, AtrousLoraAdapter)]


def attach_adapters(encoder: ImageEncoder, cfg: RunConfig, rng: np.random.Generator,
                    precision: Precision = Precision.F32) -> list[AtrousLoraAdapter]:
    """Attach AtrousLoRA adapters at the configured placements.

    ``"block"`` adds a residual adapter (identity base) after the block;
    projection names wrap that frozen attention projection.
    """
    a = cfg.adapter
    a.validate(cfg.model.depth)
    grid = (cfg.model.grid, cfg.model.grid)
    made = []
    for i in a.block_indices(cfg.model.depth):
        blk = encoder.blocks[i]
        for name in a.placement:
            owner, attr = (blk, "adapter") if name == "block" else (blk.attn, name)
            current = getattr(owner, attr)
            if isinstance(current, AtrousLoraAdapter):
                raise ConfigError(f"block {i} placement {name} already adapted")
            base = Identity(cfg.model.embed_dim) if name == "block" else current
            adapter = AtrousLoraAdapter(base, a.rank, grid, rng, a.rates, precision,
                                        attention=a.atrous_attention)
            setattr(owner, attr, adapter)
            made.append(adapter)
    return made


def encode_image(images: Tensor, encoder: ImageEncoder) -> Tensor:
    return encoder(images)


# ---------------------------------------------------------------------------
# prompt encoder

class PromptEncoder(Module):
    """Frozen box encoder: sinusoidal features of each corner plus a corner-type embedding.

    For normalized coordinates ``(u, v)`` the positional part is
    ``[sin(2 pi f u), cos(2 pi f u), sin(2 pi f v), cos(2 pi f v)]`` over a
    geometric ladder of frequencies ``f`` from 1 to ``img_size / 2``.
    """

    def __init__(self, img_size: int, dim: int, rng: np.random.Generator,
                 precision: Precision = Precision.F32):
        if dim % 4:
            raise ConfigError(f"corner embedding dim {dim} must be divisible by 4")
        self.img_size = img_size
        n = dim // 4
        self.freqs = Parameter(np.geomspace(1.0, max(img_size / 2, 1.0), n).astype(precision.dtype),
                               trainable=False)
        self.corner_embed = Parameter(rng.standard_normal((2, dim)).astype(precision.dtype),
                                      trainable=False)

    @property
    def dim(self) -> int:
        return self.corner_embed.shape[1]

    def positional(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        f = self.freqs.data.astype(np.float64)
        au = 2 * np.pi * uv[..., 0:1] * f
        av = 2 * np.pi * uv[..., 1:2] * f
        pe = np.concatenate([np.sin(au), np.cos(au), np.sin(av), np.cos(av)], axis=-1)
        return pe.astype(self.freqs.dtype)

    def forward(self, boxes) -> Tensor:
        """Embed boxes as ``[B, 2, dim]`` (top-left corner first)."""
        boxes = [b if isinstance(b, BBoxPrompt) else BBoxPrompt.from_seq(b) for b in boxes]
        corners = np.array([[[b.x0, b.y0], [b.x1, b.y1]] for b in
                            (bb.validate(self.img_size) for bb in boxes)], dtype=np.float64)
        pe = self.positional(corners / self.img_size)
        return Tensor(pe + self.corner_embed.data[None])

    def dense_pe(self, grid: int) -> Tensor:
        """Positional features at patch centers, row-major, ``[grid*grid, dim]``."""
        c = (np.arange(grid) + 0.5) / grid
        u, v = np.meshgrid(c, c)
        return Tensor(self.positional(np.stack([u.ravel(), v.ravel()], axis=-1)))


def encode_prompt(box: BBoxPrompt, p: PromptEncoder) -> Tensor:
    return reshape(p([box]), (2, p.dim))


# ---------------------------------------------------------------------------
# mask decoder

class DecoderAttention(Module):
    def __init__(self, dim: int, heads: int, rng, precision: Precision):
        self.q = Linear(dim, dim, rng, precision=precision)
        # softmax is shift-invariant, so a key bias would never receive gradient
        self.k = Linear(dim, dim, rng, bias=False, precision=precision)
        self.v = Linear(dim, dim, rng, precision=precision)
        self.out = Linear(dim, dim, rng, precision=precision)
        self.heads = heads

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        h = self.heads
        o = softmax_attention(_split_heads(self.q(q), h), _split_heads(self.k(k), h),
                              _split_heads(self.v(v), h))
        return self.out(_merge_heads(o))


class TwoWayLayer(Module):
    """Token self-attention, token-to-image attention, MLP, image-to-token attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng, precision: Precision):
        self.self_attn = DecoderAttention(dim, heads, rng, precision)
        self.norm1 = LayerNorm(dim, precision=precision)
        self.cross_token_to_image = DecoderAttention(dim, heads, rng, precision)
        self.norm2 = LayerNorm(dim, precision=precision)
        self.fc1 = Linear(dim, int(dim * mlp_ratio), rng, precision=precision)
        self.fc2 = Linear(int(dim * mlp_ratio), dim, rng, precision=precision)
        self.norm3 = LayerNorm(dim, precision=precision)
        self.cross_image_to_token = DecoderAttention(dim, heads, rng, precision)
        self.norm4 = LayerNorm(dim, precision=precision)

    def forward(self, queries, keys, query_pe, key_pe):
        q = add(queries, query_pe)
        queries = self.norm1(add(queries, self.self_attn(q, q, queries)))
        q, k = add(queries, query_pe), add(keys, key_pe)
        queries = self.norm2(add(queries, self.cross_token_to_image(q, k, keys)))
        queries = self.norm3(add(queries, self.fc2(relu(self.fc1(queries)))))
        q = add(queries, query_pe)
        keys = self.norm4(add(keys, self.cross_image_to_token(k, q, queries)))
        return queries, keys


class MaskDecoder(Module):
    """Fuses image tokens with box tokens and predicts a probability mask.

    A learned mask token and the two corner tokens attend to the image
    tokens through ``depth`` two-way layers.  Image tokens are reshaped to a
    grid, upsampled 4x by two stride-2 transposed convolutions, and dotted
    with an MLP projection of the mask token to give logits.
    """

    def __init__(self, dim: int, prompt_dim: int, grid: int, rng: np.random.Generator,
                 depth: int = 2, heads: int = 2, mlp_ratio: float = 4.0,
                 precision: Precision = Precision.F32):
        self.grid = grid
        self.prompt_proj = (None if prompt_dim == dim else
                            Linear(prompt_dim, dim, rng, bias=False, precision=precision, frozen=True))
        self.mask_token = Parameter(rng.standard_normal((1, 1, dim)).astype(precision.dtype))
        self.layers = [TwoWayLayer(dim, heads, mlp_ratio, rng, precision) for _ in range(depth)]
        self.final_attn = DecoderAttention(dim, heads, rng, precision)
        self.norm_final = LayerNorm(dim, precision=precision)
        self.up1 = ConvTranspose2d(dim, dim // 4, 2, rng, stride=2, precision=precision)
        self.up_norm = LayerNorm2d(dim // 4, precision=precision)
        self.up2 = ConvTranspose2d(dim // 4, dim // 8, 2, rng, stride=2, precision=precision)
        self.hyper1 = Linear(dim, dim, rng, precision=precision)
        self.hyper2 = Linear(dim, dim // 8, rng, precision=precision)

    @property
    def native_resolution(self) -> int:
        return 4 * self.grid

    def project_prompt(self, t: Tensor) -> Tensor:
        return t if self.prompt_proj is None else self.prompt_proj(t)

    def logits(self, img_emb: Tensor, prompt_emb: Tensor, image_pe: Tensor) -> Tensor:
        b, n, dim = img_emb.shape
        if n != self.grid ** 2:
            raise ShapeError(f"decoder expects {self.grid ** 2} image tokens, got {n}")
        if prompt_emb.ndim == 2:
            prompt_emb = broadcast_to(prompt_emb, (b,) + prompt_emb.shape)
        prompts = self.project_prompt(prompt_emb)
        tokens = concat([broadcast_to(self.mask_token, (b, 1, dim)), prompts], axis=1)
        key_pe = self.project_prompt(image_pe)
        queries, keys = tokens, img_emb
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        q, k = add(queries, tokens), add(keys, key_pe)
        queries = self.norm_final(add(queries, self.final_attn(q, k, keys)))

        g = self.grid
        src = reshape(transpose(keys, (0, 2, 1)), (b, dim, g, g))
        up = gelu(self.up2(gelu(self.up_norm(self.up1(src)))))
        hyper = self.hyper2(relu(self.hyper1(queries[:, 0:1, :])))  # b, 1, dim/8
        side = self.native_resolution
        flat = reshape(up, (b, dim // 8, side * side))
        return reshape(matmul(hyper, flat), (b, 1, side, side))

    def forward(self, img_emb: Tensor, prompt_emb: Tensor, image_pe: Tensor,
                out_size: int) -> Tensor:
        probs = sigmoid(self.logits(img_emb, prompt_emb, image_pe))
        return bilinear_resize(probs, out_size, out_size)


def decode_mask(img_emb, prompt_emb, d: MaskDecoder, image_pe, out_size: int) -> Tensor:
    return d(img_emb, prompt_emb, image_pe, out_size)


# ---------------------------------------------------------------------------
# full model

class VesselSegmenter(Module):
    def __init__(self, cfg: RunConfig, precision: Precision = Precision.F32):
        cfg.validate()
        m = cfg.model
        self.cfg = cfg
        self.precision = precision
        self.encoder = ImageEncoder(m, np.random.default_rng([cfg.seed, 0]), precision)
        self.prompt_encoder = PromptEncoder(m.img_size, m.corner_embed_dim,
                                            np.random.default_rng([cfg.seed, 2]), precision)
        self.decoder = MaskDecoder(m.decoder_dim, m.corner_embed_dim, m.grid,
                                   np.random.default_rng([cfg.seed, 3]), m.decoder_depth,
                                   m.decoder_heads, m.decoder_mlp_ratio, precision)
        self.prompt_encoder.freeze()
        attach_adapters(self.encoder, cfg, np.random.default_rng([cfg.seed, 1]), precision)
        if m.freeze_decoder:
            self.decoder.freeze()
        if self.decoder.prompt_proj is not None:
            self.decoder.prompt_proj.freeze()

    @property
    def adapters(self) -> list[AtrousLoraAdapter]:
        return self.encoder.adapters()

    def as_input(self, images) -> Tensor:
        if isinstance(images, Tensor):
            arr = images
        else:
            arr = Tensor(np.asarray(images, dtype=self.precision.dtype))
        if arr.ndim == 3:
            arr = reshape(arr, (1,) + arr.shape)
        return arr

    def forward(self, images, boxes: Sequence) -> Tensor:
        """Probability masks ``[B, 1, S, S]`` for images ``[B, 3, S, S]`` and one box per image."""
        x = self.as_input(images)
        if len(boxes) != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} images but {len(boxes)} boxes")
        emb = self.encoder(x)
        prompt = self.prompt_encoder(boxes)
        pe = self.prompt_encoder.dense_pe(self.cfg.model.grid)
        return self.decoder(emb, prompt, pe, self.cfg.model.img_size)

    def frozen_state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters() if not p.requires_grad}

    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


def forward_segment(images, boxes, model: VesselSegmenter) -> Tensor:
    return model(images, boxes)


def build_model(cfg: RunConfig, precision: Precision = Precision.F32) -> VesselSegmenter:
    return VesselSegmenter(cfg, precision)


def component_of(name: str) -> str:
    """Accounting bucket for a parameter name."""
    if name.startswith("encoder."):
        if ".attention." in name:
            return "atrous_attention"
        if name.endswith(".w_a") or name.endswith(".w_b"):
            return "lora"
        return "encoder"
    if name.startswith("prompt_encoder."):
        return "prompt_encoder"
    return "mask_decoder"


def parameter_table(model: VesselSegmenter) -> list[dict]:
    rows: dict[str, dict] = {}
    for name, p in model.named_parameters():
        row = rows.setdefault(component_of(name), {"total": 0, "trainable": 0})
        row["total"] += p.size
        if p.requires_grad:
            row["trainable"] += p.size
    order = ["encoder", "lora", "atrous_attention", "prompt_encoder", "mask_decoder"]
    out = []
    for comp in order:
        r = rows.get(comp, {"total": 0, "trainable": 0})
        out.append({"component": comp, **r,
                    "ratio": r["trainable"] / r["total"] if r["total"] else 0.0})
    total = sum(r["total"] for r in out)
    trainable = sum(r["trainable"] for r in out)
    out.append({"component": "total", "total": total, "trainable": trainable,
                "ratio": trainable / total if total else 0.0})
    return out
