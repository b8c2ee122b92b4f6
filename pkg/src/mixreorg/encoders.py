"""Image and text encoders shared by the original, mixed and restored branches.

Image path: patch embedding -> contextual layer(s) -> stage-1 layers (with
``s1`` group tokens) -> grouping block 1 -> post layers (with ``s2`` stage-2
group tokens) -> grouping block 2 -> post layers -> output MLP.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .numerics import (
    Tensor,
    broadcast_to,
    clamp_min,
    concat,
    embed_lookup,
    gelu,
    gumbel_softmax_st,
    l2_normalize,
    layer_norm,
    softmax,
)
from .numerics import rng as rngmod
from .synthdata import EOS

TAU_MIN, TAU_MAX = 0.01, 100.0
INIT_STD = 0.02
# pixel standardisation; without it every image embeds almost identically at init
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


class EncoderParams(dict):
    """Flat ``name -> Tensor`` mapping holding every learnable tensor."""

    def __init__(self, config: ModelConfig, tensors=None):
        super().__init__(tensors or {})
        self.config = config

    @property
    def tau(self) -> float:
        return float(np.exp(self["log_tau"].data))

    def clamp_tau(self) -> None:
        lt = self["log_tau"]
        lt.data = np.clip(lt.data, math.log(TAU_MIN), math.log(TAU_MAX)).astype(lt.dtype)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self.values())


@dataclass
class BranchOutput:
    attn: Tensor  # B x N x s2, row-stochastic patch -> segment map
    seg_tokens: Tensor  # B x s2 x d
    seg_embed: Tensor  # B x s2 x D, unit rows
    z: Tensor  # B x D, unit rows
    assignments: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# parameters


def _layer_shapes(prefix: str, d: int, ratio: int) -> dict:
    h = d * ratio
    return {
        f"{prefix}.ln1.w": ("ones", (d,)),
        f"{prefix}.ln1.b": ("zeros", (d,)),
        f"{prefix}.qkv.w": ("normal", (d, 3 * d)),
        f"{prefix}.qkv.b": ("zeros", (3 * d,)),
        f"{prefix}.proj.w": ("normal", (d, d)),
        f"{prefix}.proj.b": ("zeros", (d,)),
        f"{prefix}.ln2.w": ("ones", (d,)),
        f"{prefix}.ln2.b": ("zeros", (d,)),
        f"{prefix}.fc1.w": ("normal", (d, h)),
        f"{prefix}.fc1.b": ("zeros", (h,)),
        f"{prefix}.fc2.w": ("normal", (h, d)),
        f"{prefix}.fc2.b": ("zeros", (d,)),
    }


def _grouping_shapes(prefix: str, d: int, ratio: int) -> dict:
    return {
        f"{prefix}.ln_g.w": ("ones", (d,)),
        f"{prefix}.ln_g.b": ("zeros", (d,)),
        f"{prefix}.ln_x.w": ("ones", (d,)),
        f"{prefix}.ln_x.b": ("zeros", (d,)),
        f"{prefix}.q.w": ("normal", (d, d)),
        f"{prefix}.k.w": ("normal", (d, d)),
        f"{prefix}.v.w": ("normal", (d, d)),
        f"{prefix}.mlp1.w": ("normal", (d, d * ratio)),
        f"{prefix}.mlp2.w": ("normal", (d * ratio, d)),
    }


def param_shapes(cfg: ModelConfig) -> dict:
    d, dt, r = cfg.dim, cfg.text_dim, cfg.mlp_ratio
    p2 = cfg.patch_size * cfg.patch_size * 3
    shapes = {
        "patch.w": ("normal", (p2, d)),
        "patch.b": ("zeros", (d,)),
        "pos": ("normal", (cfg.N, d)),
        "group1": ("normal", (cfg.s1, d)),
        "group2": ("normal", (cfg.s2, d)),
    }
    for i in range(cfg.contextual_layers):
        shapes.update(_layer_shapes(f"ctx.{i}", d, r))
    for i in range(cfg.stage1_layers):
        shapes.update(_layer_shapes(f"stage1.{i}", d, r))
    shapes.update(_grouping_shapes("group_block1", d, r))
    for i in range(cfg.post_layers1):
        shapes.update(_layer_shapes(f"post1.{i}", d, r))
    shapes.update(_grouping_shapes("group_block2", d, r))
    for i in range(cfg.post_layers2):
        shapes.update(_layer_shapes(f"post2.{i}", d, r))
    shapes.update(
        {
            "ln_f.w": ("ones", (d,)),
            "ln_f.b": ("zeros", (d,)),
            "head.fc1.w": ("normal", (d, d)),
            "head.fc1.b": ("zeros", (d,)),
            "head.fc2.w": ("normal", (d, cfg.joint_dim)),
            "head.fc2.b": ("zeros", (cfg.joint_dim,)),
            "tok_emb": ("normal", (cfg.vocab_size, dt)),
            "text_pos": ("normal", (cfg.max_len, dt)),
        }
    )
    for i in range(cfg.text_layers):
        shapes.update(_layer_shapes(f"text.{i}", dt, r))
    shapes.update(
        {
            "ln_t.w": ("ones", (dt,)),
            "ln_t.b": ("zeros", (dt,)),
            "text_proj.w": ("normal", (dt, cfg.joint_dim)),
            "log_tau": ("tau", ()),
        }
    )
    return shapes


def init_params(cfg: ModelConfig) -> EncoderParams:
    gen = rngmod.stream(cfg.seed, rngmod.INIT)
    dtype = np.float64 if cfg.float64 else np.float32
    params = EncoderParams(cfg)
    for name, (kind, shape) in param_shapes(cfg).items():
        if kind == "normal":
            arr = gen.normal(0.0, INIT_STD, shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "zeros":
            arr = np.zeros(shape)
        else:
            arr = np.array(math.log(cfg.tau_init))
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# building blocks


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """B x H x W x 3 raster -> B x N x (patch*patch*3), row-major patch order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def patch_embed(params: EncoderParams, images: np.ndarray, with_pos: bool = True) -> Tensor:
    cfg = params.config
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"image shape {images.shape[1:]} does not match config {cfg.image_size}x{cfg.image_size}x3")
    flat = Tensor(patchify((images - PIXEL_MEAN) / PIXEL_STD, cfg.patch_size))
    x = flat @ params["patch.w"] + params["patch.b"]
    return x + params["pos"] if with_pos else x


def _mlp(params, prefix: str, x: Tensor) -> Tensor:
    h = gelu(x @ params[f"{prefix}.fc1.w"] + params[f"{prefix}.fc1.b"])
    return h @ params[f"{prefix}.fc2.w"] + params[f"{prefix}.fc2.b"]


def attention(params, prefix: str, x: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    qkv = x @ params[f"{prefix}.qkv.w"] + params[f"{prefix}.qkv.b"]
    qkv = qkv.reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        logits = logits + mask
    out = softmax(logits, axis=-1) @ v
    out = out.transpose(0, 2, 1, 3).reshape(b, t, d)
    return out @ params[f"{prefix}.proj.w"] + params[f"{prefix}.proj.b"]


def transformer_layer(params, prefix: str, x: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm self-attention and MLP blocks, each with a residual connection."""
    h = layer_norm(x, params[f"{prefix}.ln1.w"], params[f"{prefix}.ln1.b"])
    x = x + attention(params, prefix, h, heads, mask)
    h = layer_norm(x, params[f"{prefix}.ln2.w"], params[f"{prefix}.ln2.b"])
    return x + _mlp(params, prefix, h)


def grouping_block(
    params,
    prefix: str,
    group_tokens: Tensor,
    patch_tokens: Tensor,
    rng: np.random.Generator | None = None,
    hard: bool = True,
    temperature: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Assign every patch to one group and pool the assigned patches.

    ``group_tokens`` is ``[..., s, d]`` and ``patch_tokens`` ``[..., n, d]``.
    Returns ``(new_tokens [..., s, d], assignment [..., n, s])`` where each
    assignment row is one-hot (straight-through) and
    ``new_k = g_k + MLP(mean of projected patches assigned to k)``.  The MLP
    has no biases, so an empty group keeps exactly its residual.
    """
    d = group_tokens.shape[-1]
    gq = layer_norm(group_tokens, params[f"{prefix}.ln_g.w"], params[f"{prefix}.ln_g.b"])
    xn = layer_norm(patch_tokens, params[f"{prefix}.ln_x.w"], params[f"{prefix}.ln_x.b"])
    q = gq @ params[f"{prefix}.q.w"]
    k = xn @ params[f"{prefix}.k.w"]
    v = xn @ params[f"{prefix}.v.w"]
    logits = (k @ q.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    assign = gumbel_softmax_st(logits, temperature, rng, axis=-1, hard=hard)
    counts = clamp_min(assign.sum(axis=-2).reshape(*assign.shape[:-2], assign.shape[-1], 1), 1.0)
    pooled = (assign.swapaxes(-1, -2) @ v) / counts
    update = gelu(pooled @ params[f"{prefix}.mlp1.w"]) @ params[f"{prefix}.mlp2.w"]
    return group_tokens + update, assign


def expand_tokens(tokens: Tensor, batch: int) -> Tensor:
    return broadcast_to(tokens, (batch,) + tokens.shape)


def contextual(params, x: Tensor) -> Tensor:
    cfg = params.config
    for i in range(cfg.contextual_layers):
        x = transformer_layer(params, f"ctx.{i}", x, cfg.heads)
    return x


def group_and_project(
    params: EncoderParams,
    group_tokens: Tensor,
    patch_tokens: Tensor,
    rng: np.random.Generator | None = None,
) -> BranchOutput:
    """Two grouping stages, post layers and the output MLP for one branch."""
    cfg = params.config
    b = patch_tokens.shape[0]
    tokens1, a1 = grouping_block(
        params, "group_block1", group_tokens, patch_tokens, rng, cfg.hard_assign, cfg.gumbel_temperature
    )
    x = concat([expand_tokens(params["group2"], b), tokens1], axis=1)
    for i in range(cfg.post_layers1):
        x = transformer_layer(params, f"post1.{i}", x, cfg.heads)
    g2, x1 = x[:, : cfg.s2], x[:, cfg.s2 :]
    seg, a2 = grouping_block(params, "group_block2", g2, x1, rng, cfg.hard_assign, cfg.gumbel_temperature)
    for i in range(cfg.post_layers2):
        seg = transformer_layer(params, f"post2.{i}", seg, cfg.heads)
    seg = layer_norm(seg, params["ln_f.w"], params["ln_f.b"])
    attn = a1 @ a2
    attn = attn / attn.sum(axis=-1, keepdims=True)
    seg_embed = l2_normalize(_mlp(params, "head", seg))
    z = l2_normalize(_mlp(params, "head", seg.mean(axis=1)))
    return BranchOutput(attn=attn, seg_tokens=seg, seg_embed=seg_embed, z=z, assignments=[a1, a2])


def stage1(params: EncoderParams, patches: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Stage-1 layers on ``[group tokens; patches]`` for the original branch.

    Returns the final token sequence and the patch-token input to each layer
    (the features later injected into the mixed branch).
    """
    cfg = params.config
    b = patches.shape[0]
    x = concat([expand_tokens(params["group1"], b), patches], axis=1)
    inputs = []
    for i in range(cfg.stage1_layers):
        inputs.append(x[:, cfg.s1 :])
        x = transformer_layer(params, f"stage1.{i}", x, cfg.heads)
    return x, inputs


def encode_image_original(params: EncoderParams, images: np.ndarray, rng: np.random.Generator | None = None) -> BranchOutput:
    """Original-image branch; the only path needed at test time."""
    out, _ = _original_with_features(params, images, rng)
    return out


def _original_with_features(params, images, rng):
    cfg = params.config
    patches = contextual(params, patch_embed(params, images))
    x, inputs = stage1(params, patches)
    out = group_and_project(params, x[:, : cfg.s1], x[:, cfg.s1 :], rng)
    return out, (patches, inputs)


# ---------------------------------------------------------------------------
# text


def _causal_mask(t: int, dtype) -> np.ndarray:
    return np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)


def encode_text(params: EncoderParams, token_ids) -> Tensor:
    """Causal transformer over token ids; returns unit-norm ``[T, D]`` embeddings
    pooled at each sequence's EOS position (last position if absent)."""
    cfg = params.config
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    if ids.shape[1] > cfg.max_len:
        warnings.warn(f"text truncated from {ids.shape[1]} to {cfg.max_len} tokens", stacklevel=2)
        ids = ids[:, : cfg.max_len]
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = sorted(set(ids[(ids < 0) | (ids >= cfg.vocab_size)].tolist()))
        raise ValueError(f"unknown token ids {bad} (vocab size {cfg.vocab_size})")
    t = ids.shape[1]
    x = embed_lookup(params["tok_emb"], ids) + params["text_pos"][:t]
    mask = _causal_mask(t, x.dtype)
    for i in range(cfg.text_layers):
        x = transformer_layer(params, f"text.{i}", x, cfg.text_heads, mask)
    x = layer_norm(x, params["ln_t.w"], params["ln_t.b"])
    is_eos = ids == EOS
    pos = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1), t - 1)
    pooled = x[np.arange(ids.shape[0]), pos]
    return l2_normalize(pooled @ params["text_proj.w"])
