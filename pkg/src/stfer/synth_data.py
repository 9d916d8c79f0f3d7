"""Procedural any-time re-identification data.

Each identity has a fixed intrinsic attribute vector (gender, build, height,
mark) that drives its silhouette. Clothing states recolor the body; the IR
modality renders a near-uniform body temperature on a cool background, so it
keeps the silhouette and drops clothing hue. Cameras are split half RGB, half
IR; sessions stand in for capture time.
"""
import itertools
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

SCENARIOS = ("DT-ST", "DT-LT", "NT-ST", "NT-LT", "AD-ST", "AD-LT")
MODALITIES = ("RGB", "IR")
ATTRIBUTE_LEVELS = (2, 3, 3, 4)  # gender, build, height, mark
ATTRIBUTE_CAPACITY = int(np.prod(ATTRIBUTE_LEVELS))

# region labels of the body layout
BG, SKIN, HAIR, UPPER, LOWER, HAT, PACK = range(7)


@dataclass(frozen=True)
class SampleMeta:
    identity: int
    clothing: int
    modality: str
    session: int
    camera: int
    shot: int = 0


@dataclass
class SyntheticDataset:
    images: np.ndarray                 # (N, C, H, W) uint8
    meta: list
    attributes: dict                   # id -> (gender, build, height, mark)
    train_ids: tuple
    test_ids: tuple
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.meta)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def indices(self, ids):
        wanted = set(ids)
        return np.array([i for i, m in enumerate(self.meta) if m.identity in wanted], dtype=np.int64)

    def refs_by_identity(self, ids=None):
        out = {}
        for i, m in enumerate(self.meta):
            if ids is None or m.identity in ids:
                out.setdefault(m.identity, []).append(ImageRef(i, m.identity))
        return out


@dataclass(frozen=True)
class ImageRef:
    index: int
    identity: int


# --------------------------------------------------------------------------- #
# Rendering
# --------------------------------------------------------------------------- #
def body_layout(attrs, H, W, shift=(0, 0)):
    """Integer region map (H, W) of the person; 0 is background."""
    gender, build, height, mark = (int(a) for a in attrs)
    yy, xx = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    cx = 0.5 + shift[1] / W
    yy = yy - shift[0] / H
    dx = np.abs(xx - cx)

    h = (0.62, 0.75, 0.88)[height]
    w = (0.16, 0.22, 0.29)[build]
    shoulder, hip = (w * 1.15, w * 0.85) if gender == 0 else (w * 0.9, w * 1.12)
    feet = 0.97
    top = feet - h
    head_cy, head_ry, head_rx = top + 0.075 * h, 0.075 * h, 0.12
    torso_top, torso_bot = top + 0.16 * h, top + 0.52 * h

    lab = np.zeros((H, W), dtype=np.int64)
    head = ((xx - cx) / head_rx) ** 2 + ((yy - head_cy) / head_ry) ** 2 <= 1.0
    t = np.clip((yy - torso_top) / (torso_bot - torso_top), 0, 1)
    torso = (yy >= torso_top) & (yy < torso_bot) & (dx <= shoulder + (hip - shoulder) * t)
    legs = (yy >= torso_bot) & (yy <= feet) & (dx <= hip * 0.95) & (dx >= 0.03)
    lab[legs] = LOWER
    lab[torso] = UPPER
    lab[head] = SKIN
    if mark == 0:
        lab[head & (yy < head_cy - 0.3 * head_ry)] = HAIR
    elif mark == 1:
        face = head & (yy >= head_cy - 0.3 * head_ry)
        hair = (dx <= head_rx * 1.3) & (yy >= top) & (yy < torso_top + 0.12 * h)
        lab[hair & ~face & ((dx >= head_rx * 0.55) | (yy < head_cy - 0.3 * head_ry))] = HAIR
    elif mark == 2:
        lab[(dx <= 0.2) & (yy >= top - 0.06) & (yy < head_cy - 0.2 * head_ry)] = HAT
    else:
        side = xx - cx
        lab[(side >= shoulder - 0.04) & (side <= shoulder + 0.13)
            & (yy >= top + 0.2 * h) & (yy < top + 0.46 * h)] = PACK
    return lab


def silhouette_mask(attrs, H, W, shift=(0, 0)):
    return body_layout(attrs, H, W, shift) > 0


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def luminance(rgb):
    return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]


def random_clothing(rng):
    """Clothing state: upper/lower colors (bright enough to stand off the
    background) plus a stripe period on the upper garment (0 = plain)."""
    return {
        "upper": _hsv_to_rgb(rng.random(), 0.35 + 0.6 * rng.random(), 0.6 + 0.35 * rng.random()),
        "lower": _hsv_to_rgb(rng.random(), 0.35 + 0.6 * rng.random(), 0.55 + 0.35 * rng.random()),
        "stripes": int(rng.choice([0, 2, 3])),
    }


def render_person(attrs, clothing, modality, H, W, rng, shift=(0, 0), gain=1.0,
                  cast=(1.0, 1.0, 1.0), noise=0.02):
    """Float image (3, H, W) in [0, 1]."""
    lab = body_layout(attrs, H, W, shift)
    rows = np.arange(H)[:, None] * np.ones((1, W))
    if modality == "RGB":
        img = np.empty((3, H, W))
        base = _hsv_to_rgb(rng.random(), rng.random(), 0.08 + 0.25 * rng.random())
        grad = 1.0 + 0.3 * (rows / H - 0.5) * rng.choice([-1, 1])
        img[:] = base[:, None, None] * grad
        for _ in range(3):  # background clutter
            y0, x0 = rng.integers(0, H), rng.integers(0, W)
            hh, ww = rng.integers(2, H // 3 + 2), rng.integers(2, W // 2 + 2)
            img[:, y0:y0 + hh, x0:x0 + ww] = _hsv_to_rgb(rng.random(), rng.random(), 0.05 + 0.3 * rng.random())[:, None, None]
        upper = clothing["upper"][:, None, None] * np.ones((3, H, W))
        if clothing["stripes"]:
            upper = upper * (1.0 - 0.3 * ((rows // clothing["stripes"]) % 2))
        colors = {SKIN: np.array([0.87, 0.68, 0.55]), HAIR: np.array([0.12, 0.09, 0.07]),
                  HAT: np.array([0.3, 0.3, 0.32]), PACK: np.array([0.32, 0.22, 0.12]),
                  LOWER: clothing["lower"]}
        for region, c in colors.items():
            img[:, lab == region] = c[:, None]
        img[:, lab == UPPER] = upper[:, lab == UPPER]
        img = img * gain * np.asarray(cast)[:, None, None]
    elif modality == "IR":
        temp = np.full((H, W), 0.12) + 0.04 * (rows / H)
        temp[lab == SKIN] = 0.86
        temp[lab == HAIR] = 0.45
        temp[lab == HAT] = 0.5
        temp[lab == PACK] = 0.36
        # garments radiate body heat; color only weakly modulates it
        temp[lab == UPPER] = 0.72 + 0.05 * (luminance(clothing["upper"]) - 0.75)
        temp[lab == LOWER] = 0.70 + 0.05 * (luminance(clothing["lower"]) - 0.7)
        img = np.repeat((temp * gain)[None], 3, axis=0)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    if noise:
        n = rng.normal(scale=noise, size=(H, W) if modality == "IR" else (3, H, W))
        img = img + n
    return np.clip(img, 0.0, 1.0)


def to_uint8(img):
    return np.round(img * 255.0).astype(np.uint8)


# --------------------------------------------------------------------------- #
# Dataset generation
# --------------------------------------------------------------------------- #
def camera_modality(camera, cams):
    return "RGB" if camera < cams // 2 else "IR"


def generate_dataset(num_ids=60, clothes_per_id=3, sessions=2, cams=4, image_size=(32, 16),
                     seed=0, num_train=None, shots=2, noise=0.02, jitter=True, lighting=1.5):
    """Render every (identity, session, clothing, camera, shot) combination.

    ``lighting`` scales a per-(camera, session) photometric condition (channel
    gain and offset; a single gain/offset for IR). Positives of a query always
    sit under a different condition than the query, so features that track the
    condition rather than the person rank impostors first.
    """
    if num_ids < 2:
        raise ValueError("num_ids must be >= 2")
    if num_ids > ATTRIBUTE_CAPACITY:
        raise ValueError(f"num_ids {num_ids} exceeds the {ATTRIBUTE_CAPACITY} distinct attribute vectors")
    if clothes_per_id < 2 or sessions < 2:
        raise ValueError("need >= 2 clothing states and >= 2 sessions per identity")
    if cams < 2 or cams % 2:
        raise ValueError("cams must be an even number >= 2 (half RGB, half IR)")
    H, W = (int(s) for s in image_size)
    if H < 8 or W < 4:
        raise ValueError(f"image size {image_size} too small")
    if num_train is None:
        num_train = int(round(num_ids * 2 / 3))
    if not 1 <= num_train < num_ids:
        raise ValueError("num_train must leave at least one test identity")
    if shots < 1:
        raise ValueError("shots must be >= 1")

    rng = np.random.default_rng(seed)
    combos = list(itertools.product(*(range(n) for n in ATTRIBUTE_LEVELS)))
    picks = rng.choice(len(combos), size=num_ids, replace=False)
    attributes = {i: combos[p] for i, p in enumerate(picks)}
    clothing = {(i, c): random_clothing(rng) for i in range(num_ids) for c in range(clothes_per_id)}
    session_gain = 0.9 + 0.2 * rng.random(sessions)
    cam_cast = {c: (0.9 + 0.2 * rng.random(3) if camera_modality(c, cams) == "RGB" else np.ones(3))
                for c in range(cams)}

    cond = {}
    for cam in range(cams):
        for s in range(sessions):
            k = 3 if camera_modality(cam, cams) == "RGB" else 1
            cond[cam, s] = (1.0 + lighting * rng.uniform(-0.25, 0.25, k)[:, None, None],
                            lighting * rng.uniform(-0.3, 0.3, k)[:, None, None])

    images, meta = [], []
    for ident in range(num_ids):
        for s in range(sessions):
            for c in range(clothes_per_id):
                for cam in range(cams):
                    mod = camera_modality(cam, cams)
                    for shot in range(shots):
                        shift = (int(rng.integers(-1, 2)), 0) if jitter else (0, 0)
                        img = render_person(attributes[ident], clothing[ident, c], mod, H, W, rng,
                                            shift=shift, gain=session_gain[s], cast=cam_cast[cam], noise=noise)
                        g, o = cond[cam, s]
                        img = np.clip(img * g + o, 0.0, 1.0)
                        images.append(to_uint8(img))
                        meta.append(SampleMeta(ident, c, mod, s, cam, shot))
    params = dict(num_ids=num_ids, clothes_per_id=clothes_per_id, sessions=sessions, cams=cams,
                  image_size=[H, W], seed=seed, num_train=num_train, shots=shots, noise=noise, jitter=jitter,
                  lighting=lighting)
    return SyntheticDataset(np.stack(images), meta, attributes,
                            tuple(range(num_train)), tuple(range(num_train, num_ids)), params)


# --------------------------------------------------------------------------- #
# Scenario pairing
# --------------------------------------------------------------------------- #
def is_junk(q, g):
    return q.identity == g.identity and q.camera == g.camera and q.session == g.session


def scenario_membership(q, g):
    """Scenarios in which gallery sample ``g`` is a legal match candidate for query ``q``."""
    if is_junk(q, g):
        return set()
    term = "ST" if (q.session == g.session and q.clothing == g.clothing) else "LT"
    mods = {"AD"}
    if q.modality == g.modality:
        mods.add("DT" if q.modality == "RGB" else "NT")
    return {f"{m}-{term}" for m in mods}


def membership_masks(query_meta, gallery_meta):
    """Dict scenario -> (Q, G) bool legality mask (vectorised scenario_membership)."""
    def cols(ms):
        return {k: np.array([getattr(m, k) for m in ms]) for k in ("identity", "clothing", "session", "camera")} | \
               {"rgb": np.array([m.modality == "RGB" for m in ms])}
    qa, ga = cols(query_meta), cols(gallery_meta)
    eq = {k: qa[k][:, None] == ga[k][None, :] for k in ("identity", "clothing", "session", "camera")}
    junk = eq["identity"] & eq["camera"] & eq["session"]
    st = eq["session"] & eq["clothing"]
    both_rgb = qa["rgb"][:, None] & ga["rgb"][None, :]
    both_ir = ~qa["rgb"][:, None] & ~ga["rgb"][None, :]
    ok = ~junk
    return {
        "DT-ST": ok & both_rgb & st, "DT-LT": ok & both_rgb & ~st,
        "NT-ST": ok & both_ir & st, "NT-LT": ok & both_ir & ~st,
        "AD-ST": ok & st, "AD-LT": ok & ~st,
    }


# --------------------------------------------------------------------------- #
# Persistence: images.npy + JSON Lines metadata
# --------------------------------------------------------------------------- #
def save_dataset(ds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    np.save(os.path.join(out_dir, "images.npy"), ds.images)
    with open(os.path.join(out_dir, "meta.jsonl"), "w", encoding="utf-8") as fh:
        for m in ds.meta:
            fh.write(json.dumps(asdict(m)) + "\n")
    with open(os.path.join(out_dir, "identities.jsonl"), "w", encoding="utf-8") as fh:
        for ident in sorted(ds.attributes):
            g, b, h, mk = ds.attributes[ident]
            split = "train" if ident in ds.train_ids else "test"
            fh.write(json.dumps({"id": ident, "split": split, "gender": g, "build": b,
                                 "height": h, "mark": mk}) + "\n")
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(ds.params, fh, indent=2, sort_keys=True)


def load_dataset(data_dir):
    try:
        images = np.load(os.path.join(data_dir, "images.npy"))
        with open(os.path.join(data_dir, "meta.jsonl"), encoding="utf-8") as fh:
            meta = [SampleMeta(**json.loads(line)) for line in fh if line.strip()]
        attributes, train, test = {}, [], []
        with open(os.path.join(data_dir, "identities.jsonl"), encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                attributes[r["id"]] = (r["gender"], r["build"], r["height"], r["mark"])
                (train if r["split"] == "train" else test).append(r["id"])
        with open(os.path.join(data_dir, "dataset.json"), encoding="utf-8") as fh:
            params = json.load(fh)
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValueError(f"cannot load dataset from {data_dir}: {e}") from None
    if len(meta) != len(images):
        raise ValueError(f"{data_dir}: {len(images)} images but {len(meta)} metadata rows")
    return SyntheticDataset(images, meta, attributes, tuple(sorted(train)), tuple(sorted(test)), params)
