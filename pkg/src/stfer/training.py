"""Training loop, evaluation driver and heatmap export."""
import logging
import math
import os

import numpy as np

from . import numeric_core as nc
from .backbone import NUM_SCENARIOS
from .checkpoint import Checkpoint
from .config import TrainConfig
from .evaluation import evaluate_descriptors
from .model import STFER, Batch, init_params, normalize_images
from .numeric_core import RngStream
from .ser import draw_keep
from .synth_data import SCENARIOS, generate_dataset, load_dataset
from .text_semantics import (DescriptionLibrary, SyntheticProvider, Vocabulary, build_library,
                             load_description_file, tokenize)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


# --------------------------------------------------------------------------- #
# Schedule and optimizer
# --------------------------------------------------------------------------- #
def lr_at(step, total_steps, warmup_steps, base_lr):
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params, grads, bufs, lr, momentum, weight_decay):
    """Nesterov SGD, in place:
    g = grad + wd*theta; buf = mu*buf + g; theta -= lr*(g + mu*buf)."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise nc.NumericError(f"non-finite gradient for {k}; step aborted")
    for k, g in grads.items():
        theta = params[k]
        g = g + weight_decay * theta
        buf = bufs.get(k)
        if buf is None:
            buf = bufs[k] = np.zeros_like(theta)
        buf *= momentum
        buf += g
        theta -= lr * (g + momentum * buf)
    return params


# --------------------------------------------------------------------------- #
# Data plumbing
# --------------------------------------------------------------------------- #
def dataset_for(cfg):
    if cfg.data_dir:
        ds = load_dataset(cfg.data_dir)
    else:
        ds = generate_dataset(num_ids=cfg.num_ids, clothes_per_id=cfg.clothes, sessions=cfg.sessions,
                              cams=cfg.cams, image_size=(cfg.image_h, cfg.image_w), seed=cfg.data_seed,
                              num_train=cfg.num_train, shots=cfg.shots,
                              lighting=cfg.lighting)
    C, H, W = ds.image_shape
    if (H, W) != (cfg.image_h, cfg.image_w):
        raise ValueError(f"dataset images are {H}x{W} but config expects {cfg.image_h}x{cfg.image_w}")
    return ds


def library_for(cfg, ds, rng):
    if cfg.descriptions:
        lib = load_description_file(cfg.descriptions)
    else:
        lib = build_library(SyntheticProvider(ds.attributes), ds.refs_by_identity(),
                            cfg.images_per_identity, rng)
    lib.check_covers(ds.attributes)
    return lib


class TextBank:
    """Tokenized descriptions per identity."""

    def __init__(self, lib, vocab, L):
        self.tokens = {i: [tokenize(t, vocab, L) for t in lib.texts(i)] for i in lib.ids()}

    def pick(self, identity, rng=None):
        opts = self.tokens[identity]
        return opts[0] if rng is None or len(opts) == 1 else opts[int(rng.integers(len(opts)))]


def sample_batch(by_identity, train_ids, P, K, rng):
    """P distinct identities x K instances each (with replacement only when an
    identity has fewer than K images)."""
    ids = rng.choice(train_ids, size=min(P, len(train_ids)), replace=False)
    idx = []
    for i in ids:
        pool = by_identity[int(i)]
        idx.extend(rng.choice(pool, size=K, replace=len(pool) < K))
    return np.array(ids), np.array(idx, dtype=np.int64)


def augment(x, cfg, rng):
    """Flip + pixel noise by default; crop (pad 1, random crop) and erase are opt-in."""
    B = x.shape[0]
    x = x.copy()
    flip = rng.random(B) < 0.5
    if cfg.aug_flip:
        x[flip] = x[flip][..., ::-1]
    if cfg.aug_crop:
        pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        offs = rng.integers(0, 3, size=(B, 2))
        H, W = x.shape[2:]
        for b in range(B):
            x[b] = pad[b, :, offs[b, 0]:offs[b, 0] + H, offs[b, 1]:offs[b, 1] + W]
    if cfg.aug_erase:
        H, W = x.shape[2:]
        for b in range(B):
            if rng.random() < 0.5:
                h, w = rng.integers(2, H // 4 + 2), rng.integers(2, W // 4 + 2)
                y0, x0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
                x[b, :, y0:y0 + h, x0:x0 + w] = rng.normal(size=(x.shape[1], h, w))
    if cfg.aug_noise:
        x = x + rng.normal(scale=cfg.aug_noise, size=x.shape)
    return x


def supervision_weights(meta_rows, mode):
    """(B, 6) weights: every image supervises every head, or (per_image) only
    the scenario families its modality belongs to."""
    B = len(meta_rows)
    if mode == "all":
        return np.ones((B, NUM_SCENARIOS))
    w = np.zeros((B, NUM_SCENARIOS))
    for b, m in enumerate(meta_rows):
        fam = "DT" if m.modality == "RGB" else "NT"
        for s_i, s in enumerate(SCENARIOS):
            if s.startswith(fam) or s.startswith("AD"):
                w[b, s_i] = 1.0
    return w


def build_model(cfg, params, num_classes=None):
    mcfg = cfg.model_config(num_classes if num_classes is not None else cfg.num_train, len(cfg.vocab) + 2)
    return STFER(mcfg, params, use_text=cfg.use_text, use_svtf=cfg.use_svtf, use_ser=cfg.use_ser)


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #
def _prepare(cfg, dataset, library, streams):
    ds = dataset if dataset is not None else dataset_for(cfg)
    lib = library if library is not None else library_for(cfg, ds, streams["sampling"].gen)
    texts = [t for i in lib.ids() for t in lib.texts(i)]
    vocab = Vocabulary(cfg.vocab) if cfg.vocab else Vocabulary.from_corpus(texts)
    cfg = cfg.replace(vocab=tuple(vocab.words[2:]), num_train=len(ds.train_ids))
    return cfg, ds, lib, vocab


def initial_checkpoint(cfg, dataset=None, library=None):
    """The epoch-0 state ``train`` would start from (same vocabulary and init draw)."""
    streams = {p: RngStream(getattr(cfg, f"seed_{p}"), p) for p in ("init", "sampling")}
    cfg, ds, lib, vocab = _prepare(cfg, dataset, library, streams)
    params = init_params(cfg.model_config(len(ds.train_ids), len(vocab)), streams["init"].gen)
    return Checkpoint(cfg, params)


def train(cfg, dataset=None, library=None, checkpoint_path=None, progress=None):
    """Train from scratch and return the final Checkpoint."""
    streams = {p: RngStream(getattr(cfg, f"seed_{p}"), p)
               for p in ("init", "sampling", "masking", "augment")}
    cfg, ds, lib, vocab = _prepare(cfg, dataset, library, streams)
    bank = TextBank(lib, vocab, cfg.text_len)

    train_ids = np.array(ds.train_ids)
    label_of = {int(i): n for n, i in enumerate(train_ids)}
    by_identity = {int(i): ds.indices([int(i)]) for i in train_ids}
    n_train_images = sum(len(v) for v in by_identity.values())

    model = build_model(cfg, init_params(cfg.model_config(len(train_ids), len(vocab)), streams["init"].gen))
    params = model.p
    bufs = {k: np.zeros_like(v) for k, v in params.items()}
    per_step = cfg.batch_ids * cfg.batch_instances
    steps_per_epoch = max(1, math.ceil(n_train_images / per_step))
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup * steps_per_epoch
    L = cfg.text_len

    trace = []
    last_good = None
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(steps_per_epoch):
            ids, idx = sample_batch(by_identity, train_ids, cfg.batch_ids, cfg.batch_instances, streams["sampling"].gen)
            tok = {int(i): bank.pick(int(i), streams["sampling"].gen) for i in ids}
            rows = [ds.meta[j] for j in idx]
            tk = [tok[m.identity] for m in rows]
            B = len(idx)
            keep = draw_keep(B, cfg.mask_prob, streams["masking"].gen)
            enc_text = streams["masking"].gen.random(B) >= cfg.text_dropout
            images = augment(normalize_images(ds.images[idx]), cfg, streams["augment"].gen)
            batch = Batch(images, np.stack([t.ids for t in tk]), np.stack([t.mask for t in tk]),
                          enc_text, keep, np.array([label_of[m.identity] for m in rows]),
                          supervision_weights(rows, cfg.supervision))
            loss, grads, _ = model.loss_and_grads(batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch + 1}", last_good)
            sgd_step(params, grads, bufs, lr_at(step, total, warm, cfg.base_lr), cfg.momentum, cfg.weight_decay)
            step += 1
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        log.info("epoch %d/%d  loss %.5f", epoch + 1, cfg.epochs, trace[-1])
        if progress is not None:
            progress(epoch + 1, trace[-1])
        last_good = Checkpoint(cfg, {k: v.copy() for k, v in params.items()},
                               {k: v.copy() for k, v in bufs.items()}, epoch + 1,
                               {p: s.state_words() for p, s in streams.items()}, list(trace))
    if checkpoint_path:
        from .checkpoint import save_checkpoint
        save_checkpoint(last_good, checkpoint_path)
    return last_good


# --------------------------------------------------------------------------- #
# Evaluation and heatmaps
# --------------------------------------------------------------------------- #
def _check_compatible(ckpt, ds):
    cfg = ckpt.config
    C, H, W = ds.image_shape
    if (H, W) != (cfg.image_h, cfg.image_w):
        raise ValueError(f"checkpoint expects {cfg.image_h}x{cfg.image_w} images, dataset has {H}x{W}")
    if ckpt.params["patch.W"].shape[0] != C * cfg.patch ** 2:
        raise ValueError("checkpoint/dataset channel mismatch")


def extract_descriptors(ckpt, ds, indices, mode="textfree", library=None, chunk=128):
    """Scenario descriptors (n, 6, D) for ``indices``. The encoder always runs
    text-free; ``mode="text"`` only feeds the pooled description to the gates."""
    if mode not in ("textfree", "text"):
        raise ValueError(f"mode must be 'textfree' or 'text', got {mode!r}")
    _check_compatible(ckpt, ds)
    cfg = ckpt.config
    model = build_model(cfg, ckpt.params)
    L = cfg.text_len
    bank = None
    if mode == "text":
        lib = library if library is not None else library_for(cfg, ds, np.random.default_rng(cfg.seed_sampling))
        bank = TextBank(lib, Vocabulary(cfg.vocab), L)
    out = []
    for s in range(0, len(indices), chunk):
        idx = np.asarray(indices[s:s + chunk])
        batch = Batch.text_free(normalize_images(ds.images[idx]), L)
        if bank is not None:
            tk = [bank.pick(ds.meta[j].identity) for j in idx]
            batch.tok_ids = np.stack([t.ids for t in tk])
            batch.tok_mask = np.stack([t.mask for t in tk])
            batch.gate_text = np.ones(len(idx), dtype=bool)
        out.append(model.descriptors(batch))
    return np.concatenate(out, axis=0)


def evaluate(ckpt, ds, mode="textfree", library=None):
    idx = ds.indices(ds.test_ids)
    desc = extract_descriptors(ckpt, ds, idx, mode, library)
    report = evaluate_descriptors(desc, [ds.meta[i] for i in idx])
    report.meta["mode"] = mode
    return report


def cls_patch_attention(ckpt, image_u8, scenario):
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    cfg = ckpt.config
    model = build_model(cfg, ckpt.params)
    batch = Batch.text_free(normalize_images(image_u8[None]), cfg.text_len)
    out, _ = model.forward(batch, with_loss=False)
    A = out["attention"][-1][0]                       # (heads, S, S)
    row = A[:, SCENARIOS.index(scenario), model.cfg.patch_slice].mean(axis=0)
    return row.reshape(cfg.image_h // cfg.patch, cfg.image_w // cfg.patch)


def heatmap_image(grid, P):
    """Min-max normalize to [0, 255] and upsample by nearest neighbour."""
    lo, hi = grid.min(), grid.max()
    if hi - lo <= 0:
        g8 = np.full(grid.shape, 128, dtype=np.uint8)
    else:
        g8 = np.round((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return np.repeat(np.repeat(g8, P, axis=0), P, axis=1)


def write_pgm(img, path):
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)


def export_heatmap(ckpt, ds, sample, scenario, out_path):
    _check_compatible(ckpt, ds)
    if not 0 <= sample < len(ds):
        raise IndexError(f"sample {sample} outside dataset of {len(ds)}")
    grid = cls_patch_attention(ckpt, ds.images[sample], scenario)
    img = heatmap_image(grid, ckpt.config.patch)
    write_pgm(img, out_path)
    return img
