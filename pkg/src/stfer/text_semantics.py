"""Identity descriptions: sampling, generation, persistence, tokenization, embedding."""
import json
import logging
import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
DEFAULT_MAX_LEN = 50
DEFAULT_IMAGES_PER_IDENTITY = 4

GENDER_TERMS = ("male", "female")
BUILD_TERMS = ("slim", "medium-build", "heavy")
HEIGHT_TERMS = ("short", "average-height", "tall")
MARK_TERMS = ("short hair", "long hair", "a hat", "a backpack")


class Description(NamedTuple):
    text: str
    source: str  # "synthetic" | "external"


class DescriptionFormatError(ValueError):
    pass


@dataclass
class DescriptionLibrary:
    records: dict = field(default_factory=dict)  # id -> list[Description]

    def add(self, identity, text, source):
        if not isinstance(text, str) or not text.strip():
            raise ValueError(f"identity {identity}: descriptions must be non-empty strings")
        if source not in ("synthetic", "external"):
            raise ValueError(f"identity {identity}: unknown source {source!r}")
        entries = self.records.setdefault(int(identity), [])
        d = Description(text, source)
        if d not in entries:
            entries.append(d)

    def texts(self, identity):
        try:
            return [d.text for d in self.records[int(identity)]]
        except KeyError:
            raise KeyError(f"no description for identity {identity}") from None

    def ids(self):
        return sorted(self.records)

    def check_covers(self, identities):
        missing = sorted(set(int(i) for i in identities) - set(self.records))
        if missing:
            raise KeyError(f"description library lacks identities {missing}")

    def __eq__(self, other):
        return isinstance(other, DescriptionLibrary) and self.records == other.records


@dataclass(frozen=True)
class SampledImageSet:
    identity: int
    images: tuple
    seed: int


def sample_identity_images(image_refs, identity, k, rng, seed=0):
    """Uniform draw of a k-subset from one identity's image references.

    ``image_refs`` is the list of that identity's references. Asking for more
    images than exist clamps to the full set (with a warning).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    refs = list(image_refs)
    if not refs:
        raise KeyError(f"identity {identity} has no images")
    if k > len(refs):
        log.warning("identity %s has only %d images; sampling all instead of %d", identity, len(refs), k)
        k = len(refs)
    picks = rng.choice(len(refs), size=k, replace=False)
    return SampledImageSet(int(identity), tuple(refs[i] for i in sorted(picks)), seed)


# --------------------------------------------------------------------------- #
# Providers
# --------------------------------------------------------------------------- #
def describe_attributes(attrs):
    """Template sentence for an (gender, build, height, mark) attribute vector."""
    gender, build, height, mark = (int(a) for a in attrs)
    return f"a {HEIGHT_TERMS[height]} {BUILD_TERMS[build]} {GENDER_TERMS[gender]} person with {MARK_TERMS[mark]}"


class SyntheticProvider:
    """Stands in for the vision-language model: reads the ground-truth
    attributes of the image's identity and ignores clothing and modality."""
    source = "synthetic"

    def __init__(self, attributes):
        self.attributes = {int(k): tuple(v) for k, v in attributes.items()}

    def __call__(self, image_ref, prompt=""):
        return describe_attributes(self.attributes[int(image_ref.identity)])


class ExternalProvider:
    """Looks up pre-generated descriptions (e.g. converted LVLM output)."""
    source = "external"

    def __init__(self, library):
        self.library = library

    def __call__(self, image_ref, prompt=""):
        ident = int(image_ref.identity)
        if ident not in self.library.records:
            raise LookupError(f"external description file has no entry for identity {ident}")
        return self.library.records[ident][0].text


def generate_description(provider, image_ref, prompt=""):
    return provider(image_ref, prompt)


def build_library(provider, refs_by_identity, k, rng, prompt=""):
    """Sample k images per identity and describe each one."""
    lib = DescriptionLibrary()
    for ident in sorted(refs_by_identity):
        sampled = sample_identity_images(refs_by_identity[ident], ident, k, rng)
        for ref in sampled.images:
            lib.add(ident, generate_description(provider, ref, prompt), provider.source)
    return lib


# --------------------------------------------------------------------------- #
# JSON Lines persistence
# --------------------------------------------------------------------------- #
def save_description_file(lib, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ident in lib.ids():
            for d in lib.records[ident]:
                fh.write(json.dumps({"id": ident, "source": d.source, "text": d.text}, ensure_ascii=False) + "\n")


def load_description_file(path):
    """Parse a description file. Repeated ids are merged in file order."""
    lib = DescriptionLibrary()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DescriptionFormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DescriptionFormatError(f"{path}:{lineno}: expected an object")
            for name in ("id", "source", "text"):
                if name not in obj:
                    raise DescriptionFormatError(f"{path}:{lineno}: missing required field '{name}'")
            if not isinstance(obj["id"], int) or isinstance(obj["id"], bool):
                raise DescriptionFormatError(f"{path}:{lineno}: field 'id' must be an integer")
            try:
                lib.add(obj["id"], obj["text"], obj["source"])
            except ValueError as e:
                raise DescriptionFormatError(f"{path}:{lineno}: {e}") from None
    return lib


# --------------------------------------------------------------------------- #
# Tokenization and embedding
# --------------------------------------------------------------------------- #
_TOKEN_RE = re.compile(r"\w+(?:-\w+)*|[^\w\s]")


def split_words(text):
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Word-level vocabulary; id 0 is padding, id 1 unknown."""

    def __init__(self, words):
        self.words = ["<pad>", "<unk>"] + [w for w in words if w not in ("<pad>", "<unk>")]
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_corpus(cls, texts):
        return cls(sorted({w for t in texts for w in split_words(t)}))

    def __len__(self):
        return len(self.words)

    def encode(self, text):
        return [self.index.get(w, UNK_ID) for w in split_words(text)]


@dataclass(frozen=True)
class TokenizedText:
    ids: np.ndarray        # (L,) int64
    mask: np.ndarray       # (L,) bool, True on real tokens
    length: int


def tokenize(text, vocab, max_len=DEFAULT_MAX_LEN):
    if not isinstance(text, str) or not text.strip():
        raise ValueError("tokenize: empty text")
    ids = vocab.encode(text)[:max_len]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[:len(ids)] = ids
    mask = np.zeros(max_len, dtype=bool)
    mask[:len(ids)] = True
    return TokenizedText(out, mask, len(ids))


def embed_text(ids, table):
    """Row lookup ``table[ids]``; works for (L,) or (B, L) id arrays."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id outside embedding table of {table.shape[0]} rows")
    return table[ids]


def embed_text_backward(dout, ids, vocab_size):
    """Scatter-add of row gradients; untouched rows stay zero."""
    g = np.zeros((vocab_size, dout.shape[-1]))
    np.add.at(g, np.asarray(ids).reshape(-1), dout.reshape(-1, dout.shape[-1]))
    return g
