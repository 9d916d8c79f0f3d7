"""Joint scenario-CLS / patch / text token encoder.

Sequence layout: six scenario CLS slots, then N patch slots, then L text
slots. Blocks are pre-norm multi-head self-attention + GELU MLP with
residuals; keys flagged False in the attention mask get exactly zero weight.
"""
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import numeric_core as nc
from .numeric_core import DimensionError, NumericError
from .synth_data import SCENARIOS

NUM_SCENARIOS = len(SCENARIOS)


@dataclass
class ModelConfig:
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    patch: int = 8
    image_h: int = 32
    image_w: int = 16
    channels: int = 3
    text_len: int = 12
    vocab_size: int = 32
    num_classes: int = 40
    num_experts: int = 4
    top_k: int = 2
    mask_prob: float = 0.3
    svtf_layer: int = -1          # -1: ceil(depth / 2)
    mlp_ratio: int = 4
    lambdas: tuple = field(default_factory=lambda: (1 / 6,) * NUM_SCENARIOS)

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        if self.svtf_layer < 0:
            self.svtf_layer = math.ceil(self.depth / 2)
        self.validate()

    def validate(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ValueError(f"image {self.image_h}x{self.image_w} not divisible by patch {self.patch}")
        if self.num_patches <= 0:
            raise ValueError("no patches")
        if not 0 <= self.svtf_layer <= self.depth:
            raise ValueError(f"svtf_layer {self.svtf_layer} outside [0, {self.depth}]")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must lie in [0, 1]")
        if len(self.lambdas) != NUM_SCENARIOS or min(self.lambdas) < 0:
            raise ValueError("lambdas must be six non-negative weights")
        if self.num_experts < 1 or self.top_k < 1:
            raise ValueError("num_experts and top_k must be >= 1")

    @property
    def num_patches(self):
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def seq_len(self):
        return NUM_SCENARIOS + self.num_patches + self.text_len

    @property
    def patch_slice(self):
        return slice(NUM_SCENARIOS, NUM_SCENARIOS + self.num_patches)

    @property
    def text_slice(self):
        return slice(NUM_SCENARIOS + self.num_patches, self.seq_len)

    @classmethod
    def vitb_scale(cls, **kw):
        base = dict(embed_dim=768, depth=12, heads=12, patch=16, image_h=256, image_w=128, text_len=50, mask_prob=0.3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def trunc_normal(rng, shape, std=0.02):
    x = rng.normal(size=shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


def init_backbone(cfg, rng):
    D, P, C = cfg.embed_dim, cfg.patch, cfg.channels
    hid = cfg.mlp_ratio * D
    p = {
        "patch.W": trunc_normal(rng, (C * P * P, D)),
        "patch.b": np.zeros(D),
        "cls": trunc_normal(rng, (NUM_SCENARIOS, D)),
        "pos": trunc_normal(rng, (cfg.seq_len, D)),
        "text.embed": trunc_normal(rng, (cfg.vocab_size, D)),
        "norm.g": np.ones(D),
        "norm.b": np.zeros(D),
    }
    for i in range(cfg.depth):
        p.update({
            f"blocks.{i}.ln1.g": np.ones(D), f"blocks.{i}.ln1.b": np.zeros(D),
            f"blocks.{i}.qkv.W": trunc_normal(rng, (D, 3 * D)), f"blocks.{i}.qkv.b": np.zeros(3 * D),
            f"blocks.{i}.proj.W": trunc_normal(rng, (D, D)), f"blocks.{i}.proj.b": np.zeros(D),
            f"blocks.{i}.ln2.g": np.ones(D), f"blocks.{i}.ln2.b": np.zeros(D),
            f"blocks.{i}.fc1.W": trunc_normal(rng, (D, hid)), f"blocks.{i}.fc1.b": np.zeros(hid),
            f"blocks.{i}.fc2.W": trunc_normal(rng, (hid, D)), f"blocks.{i}.fc2.b": np.zeros(D),
        })
    return p


# --------------------------------------------------------------------------- #
# Patch embedding and sequence assembly
# --------------------------------------------------------------------------- #
def patchify(images, P):
    """(B, C, H, W) -> (B, N, C*P*P), patches in row-major grid order."""
    B, C, H, W = images.shape
    if H % P or W % P:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {P}")
    x = images.reshape(B, C, H // P, P, W // P, P).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // P) * (W // P), C * P * P)


def patch_embed(images, W, b, P):
    """Non-overlapping PxP patches, each linearly projected (a stride-P convolution).
    Accepts a single (C, H, W) image or a (B, C, H, W) batch."""
    single = images.ndim == 3
    x = images[None] if single else images
    if x.shape[1] * P * P != W.shape[0]:
        raise DimensionError(f"patch_embed: {x.shape[1]}x{P}x{P} patches vs projection {W.shape}")
    v = patchify(x, P) @ W + b
    return v[0] if single else v


def assemble_input(cls, v, t, pos, text_mask, text_present=None):
    """Z_in = [CLS; v; t] + E_pos and the key mask.

    ``t`` (B, L, D) text embeddings, ``text_mask`` (B, L) True on real tokens,
    ``text_present`` (B,) False for samples running text-free: their text
    slots are zeroed and masked.
    """
    B, N, D = v.shape
    L = t.shape[1]
    if cls.shape != (NUM_SCENARIOS, D) or t.shape[2] != D or pos.shape != (NUM_SCENARIOS + N + L, D):
        raise DimensionError(f"assemble_input: cls {cls.shape}, v {v.shape}, t {t.shape}, pos {pos.shape}")
    z = np.concatenate([np.broadcast_to(cls, (B, NUM_SCENARIOS, D)), v, t], axis=1) + pos
    if text_present is None:
        text_present = np.ones(B, dtype=bool)
    text_present = np.asarray(text_present, dtype=bool)
    z[~text_present, NUM_SCENARIOS + N:] = 0.0
    key_mask = np.ones((B, NUM_SCENARIOS + N + L), dtype=bool)
    key_mask[:, NUM_SCENARIOS + N:] = np.asarray(text_mask, dtype=bool) & text_present[:, None]
    return z, key_mask


# --------------------------------------------------------------------------- #
# Transformer block
# --------------------------------------------------------------------------- #
def attention_forward(x, key_mask, p, pre, heads):
    B, S, D = x.shape
    dh = D // heads
    qkv = x @ p[pre + "qkv.W"] + p[pre + "qkv.b"]
    qkv = qkv.reshape(B, S, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    A = nc.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
    ctx = (A @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
    out = ctx @ p[pre + "proj.W"] + p[pre + "proj.b"]
    return out, (x, q, k, v, A, ctx)


def attention_backward(dout, cache, p, pre, heads, grads):
    x, q, k, v, A, ctx = cache
    B, S, D = x.shape
    dh = D // heads
    dctx, dW, db = nc.linear_backward(dout, ctx, p[pre + "proj.W"])
    grads[pre + "proj.W"] += dW
    grads[pre + "proj.b"] += db
    dctx = dctx.reshape(B, S, heads, dh).transpose(0, 2, 1, 3)
    dA = dctx @ v.transpose(0, 1, 3, 2)
    dv = A.transpose(0, 1, 3, 2) @ dctx
    dscores = nc.softmax_backward(dA, A, axis=-1) / math.sqrt(dh)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, S, 3 * D)
    dx, dW, db = nc.linear_backward(dqkv, x, p[pre + "qkv.W"])
    grads[pre + "qkv.W"] += dW
    grads[pre + "qkv.b"] += db
    return dx


def block_forward(z, key_mask, p, i, heads):
    pre = f"blocks.{i}."
    h1, ln1 = nc.layer_norm(z, p[pre + "ln1.g"], p[pre + "ln1.b"])
    a, att = attention_forward(h1, key_mask, p, pre, heads)
    z1 = z + a
    h2, ln2 = nc.layer_norm(z1, p[pre + "ln2.g"], p[pre + "ln2.b"])
    u = h2 @ p[pre + "fc1.W"] + p[pre + "fc1.b"]
    m = nc.gelu(u) @ p[pre + "fc2.W"] + p[pre + "fc2.b"]
    out = z1 + m
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite activations in encoder block {i}")
    return out, (ln1, att, h2, ln2, u)


def block_backward(dz_out, cache, p, i, heads, grads):
    pre = f"blocks.{i}."
    ln1, att, h2, ln2, u = cache
    gu = nc.gelu(u)
    dg, dW, db = nc.linear_backward(dz_out, gu, p[pre + "fc2.W"])
    grads[pre + "fc2.W"] += dW
    grads[pre + "fc2.b"] += db
    du = nc.gelu_backward(dg, u)
    dh2, dW, db = nc.linear_backward(du, h2, p[pre + "fc1.W"])
    grads[pre + "fc1.W"] += dW
    grads[pre + "fc1.b"] += db
    dz1, dgam, dbet = nc.layer_norm_backward(dh2, ln2)
    grads[pre + "ln2.g"] += dgam
    grads[pre + "ln2.b"] += dbet
    dz1 = dz1 + dz_out
    dh1 = attention_backward(dz1, att, p, pre, heads, grads)
    dz, dgam, dbet = nc.layer_norm_backward(dh1, ln1)
    grads[pre + "ln1.g"] += dgam
    grads[pre + "ln1.b"] += dbet
    return dz + dz1


def encoder_forward(z, key_mask, p, cfg, hook=None):
    """Run ``cfg.depth`` blocks. ``hook`` (an object with ``forward(z, mask)``
    and ``backward(dz, cache, grads)``) is applied after block
    ``cfg.svtf_layer`` (counted from 1; 0 means before the first block)."""
    caches = []
    hook_cache = None
    for i in range(cfg.depth + 1):
        if hook is not None and i == cfg.svtf_layer:
            z, hook_cache = hook.forward(z, key_mask)
        if i == cfg.depth:
            break
        z, c = block_forward(z, key_mask, p, i, cfg.heads)
        caches.append(c)
    return z, (caches, hook_cache)


def encoder_backward(dz, cache, p, cfg, grads, hook=None):
    caches, hook_cache = cache
    for i in range(cfg.depth, -1, -1):
        if i < cfg.depth:
            dz = block_backward(dz, caches[i], p, i, cfg.heads, grads)
        if hook is not None and i == cfg.svtf_layer:
            dz = hook.backward(dz, hook_cache, grads)
    return dz


def attention_maps(cache):
    """Per-block attention probabilities (B, heads, S, S)."""
    return [c[1][4] for c in cache[0]]
