"""Training configuration and its ``key = value`` file format."""
import dataclasses
import math
from dataclasses import dataclass, field

from .backbone import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # model
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    patch: int = 8
    text_len: int = 12
    num_experts: int = 4
    top_k: int = 2
    mask_prob: float = 0.3
    svtf_layer: int = -1
    lambdas: tuple = (1 / 6,) * 6
    # ablation flags
    use_text: bool = True
    use_svtf: bool = True
    use_ser: bool = True
    # optimization
    epochs: int = 120
    batch_ids: int = 8
    batch_instances: int = 4
    base_lr: float = 0.05             # desk preset; vitb_preset() uses 8e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = -1           # -1: 10% of epochs
    supervision: str = "all"          # all | per_image
    text_dropout: float = 0.7         # per-sample prob. of running the encoder text-free
    # augmentation
    aug_flip: bool = True
    aug_noise: float = 0.02
    aug_crop: bool = False
    aug_erase: bool = False
    # seeds, one per rng purpose
    seed_init: int = 0
    seed_sampling: int = 0
    seed_masking: int = 0
    seed_augment: int = 0
    strict: bool = True
    # data
    data_dir: str = ""
    descriptions: str = ""
    num_ids: int = 60
    num_train: int = 40
    clothes: int = 3
    sessions: int = 2
    cams: int = 4
    shots: int = 2
    image_h: int = 32
    image_w: int = 16
    data_seed: int = 0
    lighting: float = 1.5             # per-(camera, session) photometric condition strength
    images_per_identity: int = 4      # k images sampled per identity for descriptions
    # filled in at train time
    vocab: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.validate()

    @classmethod
    def vitb_preset(cls, **kw):
        """The published optimisation recipe at the published model scale."""
        base = dict(embed_dim=768, depth=12, heads=12, patch=16, text_len=50, image_h=256, image_w=128,
                    base_lr=8e-3, momentum=0.9, weight_decay=5e-4, epochs=120, mask_prob=0.3,
                    aug_crop=True, aug_erase=True, text_dropout=0.0)
        base.update(kw)
        return cls(**base)

    @property
    def warmup(self):
        return max(1, int(round(0.1 * self.epochs))) if self.warmup_epochs < 0 else self.warmup_epochs

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.warmup < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup}) must be < epochs ({self.epochs})")
        if self.supervision not in ("all", "per_image"):
            raise ConfigError(f"supervision must be 'all' or 'per_image', got {self.supervision!r}")
        if self.batch_ids < 1 or self.batch_instances < 1:
            raise ConfigError("batch_ids and batch_instances must be >= 1")
        if not 0 <= self.text_dropout <= 1:
            raise ConfigError("text_dropout must lie in [0, 1]")

    def model_config(self, num_classes, vocab_size):
        return ModelConfig(embed_dim=self.embed_dim, depth=self.depth, heads=self.heads, patch=self.patch,
                           image_h=self.image_h, image_w=self.image_w, text_len=self.text_len,
                           vocab_size=vocab_size, num_classes=num_classes, num_experts=self.num_experts,
                           top_k=self.top_k, mask_prob=self.mask_prob, svtf_layer=self.svtf_layer,
                           lambdas=self.lambdas)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    # ------------------------------------------------------------------ text io
    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, source="<config>"):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        defaults = cls()
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
            try:
                values[key] = _parse(val, getattr(defaults, key))
            except ValueError as e:
                raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {e}") from None
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), source=path)


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return " ".join(_format(x) for x in v)
    return str(v)


def _parse(val, like):
    if isinstance(like, bool):
        if val.lower() in ("true", "1", "yes", "on"):
            return True
        if val.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {val!r}")
    if isinstance(like, int):
        return int(val)
    if isinstance(like, float):
        x = float(val)
        if not math.isfinite(x):
            raise ValueError("must be finite")
        return x
    if isinstance(like, tuple):
        items = val.replace(",", " ").split()
        if like and isinstance(like[0], float):
            return tuple(float(x) for x in items)
        return tuple(items)
    return val
