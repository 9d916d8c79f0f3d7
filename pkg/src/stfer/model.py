"""The full network: backbone + SVTF hook + SER + scenario heads."""
from dataclasses import dataclass

import numpy as np

from . import numeric_core as nc
from .backbone import (NUM_SCENARIOS, assemble_input, attention_maps, encoder_backward,
                       encoder_forward, init_backbone, patch_embed, patchify)
from .objective import batch_objective, batch_objective_backward, init_heads
from .ser import ExpertRouter, init_ser, pool_text_global
from .svtf import SVTF, init_filter
from .text_semantics import embed_text, embed_text_backward


@dataclass
class Batch:
    images: np.ndarray          # (B, C, H, W) float64, normalized
    tok_ids: np.ndarray         # (B, L) int
    tok_mask: np.ndarray        # (B, L) bool, True on real tokens
    backbone_text: np.ndarray   # (B,) bool: text slots enter the encoder
    gate_text: np.ndarray       # (B,) bool: pooled text reaches the gates (the zero-mask draw)
    labels: np.ndarray = None   # (B,) int
    supervise: np.ndarray = None  # (B, 6) float weights, default all ones

    @classmethod
    def text_free(cls, images, L, labels=None):
        B = images.shape[0]
        return cls(images, np.zeros((B, L), dtype=np.int64), np.zeros((B, L), dtype=bool),
                   np.zeros(B, dtype=bool), np.zeros(B, dtype=bool), labels)


def init_params(cfg, rng):
    """All learnable tensors, keyed by name. ``rng`` is a numpy Generator
    (normally the "init" RngStream)."""
    p = init_backbone(cfg, rng)
    p.update(init_filter(cfg.embed_dim, rng))
    p.update(init_ser(cfg.embed_dim, cfg.num_experts, rng))
    p.update(init_heads(cfg.embed_dim, cfg.num_classes, rng))
    return p


def normalize_images(u8):
    return (np.asarray(u8, dtype=np.float64) / 255.0 - 0.5) / 0.5


class STFER:
    def __init__(self, cfg, params, use_text=True, use_svtf=True, use_ser=True):
        self.cfg = cfg
        self.p = params
        self.use_text = use_text
        self.use_svtf = use_svtf
        self.use_ser = use_ser
        self.router = ExpertRouter(params, cfg, use_ser=use_ser)
        self.svtf = SVTF(params, cfg) if use_svtf else None

    def forward(self, batch, with_loss=True):
        cfg, p = self.cfg, self.p
        use_text = self.use_text
        tok_mask = batch.tok_mask & use_text
        backbone_text = np.asarray(batch.backbone_text, dtype=bool) & use_text
        gate_text = np.asarray(batch.gate_text, dtype=bool) & use_text

        t = embed_text(batch.tok_ids, p["text.embed"])
        v = patch_embed(batch.images, p["patch.W"], p["patch.b"], cfg.patch)
        z, key_mask = assemble_input(p["cls"], v, t, p["pos"], tok_mask, backbone_text)
        zL, enc_cache = encoder_forward(z, key_mask, p, cfg, hook=self.svtf)
        zf, ln_cache = nc.layer_norm(zL, p["norm.g"], p["norm.b"])
        cls_out = zf[:, :NUM_SCENARIOS]

        t_global = pool_text_global(t, tok_mask)
        t_hat = t_global * gate_text[:, None]
        O, ser_cache = self.router.forward(cls_out, t_hat)

        out = {"descriptors": O, "cls": cls_out, "encoded": zL, "key_mask": key_mask,
               "attention": attention_maps(enc_cache), "t_hat": t_hat}
        cache = (batch, t, tok_mask, backbone_text, gate_text, enc_cache, ln_cache, ser_cache, zL.shape)
        if with_loss:
            loss, per, obj_cache = batch_objective(O, batch.labels, p["head.W"], p["head.b"],
                                                   cfg.lambdas, batch.supervise)
            if not np.isfinite(loss):
                raise nc.NumericError("loss is not finite")
            out["loss"], out["per_scenario"] = loss, per
            cache = cache + (obj_cache,)
        return out, cache

    def backward(self, cache):
        cfg, p = self.cfg, self.p
        batch, t, tok_mask, backbone_text, gate_text, enc_cache, ln_cache, ser_cache, zshape, obj_cache = cache
        grads = {k: np.zeros_like(v) for k, v in p.items()}

        dO = batch_objective_backward(obj_cache, p["head.W"], grads)
        dcls, dt_hat = self.router.backward(dO, ser_cache, grads)
        dzf = np.zeros(zshape)
        dzf[:, :NUM_SCENARIOS] = dcls
        dzL, dg, db = nc.layer_norm_backward(dzf, ln_cache)
        grads["norm.g"] += dg
        grads["norm.b"] += db
        dz = encoder_backward(dzL, enc_cache, p, cfg, grads, hook=self.svtf)

        ts, ps = cfg.text_slice, cfg.patch_slice
        dz[~backbone_text, ts] = 0.0
        grads["pos"] += dz.sum(axis=0)
        grads["cls"] += dz[:, :NUM_SCENARIOS].sum(axis=0)
        dv = dz[:, ps]
        patches = patchify(batch.images, cfg.patch)
        grads["patch.W"] += patches.reshape(-1, patches.shape[-1]).T @ dv.reshape(-1, dv.shape[-1])
        grads["patch.b"] += dv.reshape(-1, dv.shape[-1]).sum(axis=0)

        dt = dz[:, ts]
        if dt_hat is not None:
            dt = dt + nc.mean_pool_backward(dt_hat * gate_text[:, None], t, -2, tok_mask)
        grads["text.embed"] += embed_text_backward(dt, batch.tok_ids, p["text.embed"].shape[0])
        return grads

    def loss_and_grads(self, batch):
        out, cache = self.forward(batch)
        return out["loss"], self.backward(cache), out

    def descriptors(self, batch):
        return self.forward(batch, with_loss=False)[0]["descriptors"]
