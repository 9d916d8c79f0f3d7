import itertools
import json
import logging
from collections import Counter

import numpy as np
import pytest

from stfer import numeric_core as nc
from stfer.synth_data import ImageRef
from stfer.text_semantics import (PAD_ID, DescriptionFormatError, DescriptionLibrary, ExternalProvider,
                                  SyntheticProvider, Vocabulary, build_library, describe_attributes,
                                  embed_text, embed_text_backward, generate_description,
                                  load_description_file, sample_identity_images, save_description_file,
                                  split_words, tokenize)


def refs(identity, n):
    return [ImageRef(identity * 100 + i, identity) for i in range(n)]


def test_sampling_exact_k_returns_full_set():
    r = refs(3, 4)
    for seed in range(5):
        s = sample_identity_images(r, 3, 4, np.random.default_rng(seed))
        assert s.images == tuple(r)


def test_sampling_replays_with_seed():
    r = refs(1, 10)
    a = sample_identity_images(r, 1, 1, np.random.default_rng(7))
    b = sample_identity_images(r, 1, 1, np.random.default_rng(7))
    assert a.images == b.images and len(a.images) == 1


def test_sampling_pairs_uniform():
    r = refs(0, 4)
    rng = np.random.default_rng(0)
    counts = Counter(sample_identity_images(r, 0, 2, rng).images for _ in range(10_000))
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / 10_000 - 1 / 6) < 0.02


def test_sampling_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        s = sample_identity_images(refs(2, 3), 2, 5, np.random.default_rng(0))
    assert len(s.images) == 3 and len(set(s.images)) == 3
    assert "only 3 images" in caplog.text


def test_template_instance():
    # gender 1 = female, build 0 = slim, height 2 = tall, mark 0 = short hair
    assert describe_attributes((1, 0, 2, 0)) == "a tall slim female person with short hair"


def test_build_only_difference():
    a = split_words(describe_attributes((0, 0, 1, 2)))
    b = split_words(describe_attributes((0, 2, 1, 2)))
    diff = [(x, y) for x, y in zip(a, b) if x != y]
    assert diff == [("slim", "heavy")]


def test_provider_ignores_clothing_and_modality():
    prov = SyntheticProvider({5: (0, 1, 1, 3)})
    texts = {generate_description(prov, ImageRef(i, 5)) for i in range(20)}
    assert len(texts) == 1


def test_external_provider_missing_identity():
    lib = DescriptionLibrary()
    lib.add(1, "a person", "external")
    with pytest.raises(LookupError, match="identity 9"):
        ExternalProvider(lib)(ImageRef(0, 9))


def test_tokenize_padding_and_truncation():
    vocab = Vocabulary.from_corpus(["one two three"])
    t = tokenize("one two three", vocab, 50)
    assert t.length == 3 and t.mask.sum() == 3 and (t.ids[3:] == PAD_ID).all()
    assert t.mask[:3].all()
    long = " ".join(["one"] * 60)
    t = tokenize(long, vocab, 50)
    assert t.length == 50 and t.ids.shape == (50,) and t.mask.all()
    with pytest.raises(ValueError):
        tokenize("", vocab, 50)


def test_tokenize_deterministic():
    vocab = Vocabulary.from_corpus(["a tall heavy male person with a hat"])
    a = tokenize("a tall heavy male person with a hat", vocab, 12)
    b = tokenize("a tall heavy male person with a hat", vocab, 12)
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.mask, b.mask)
    assert (a.ids < len(vocab)).all()


def test_embed_lookup_and_errors():
    table = np.arange(15.0).reshape(5, 3)
    assert np.array_equal(embed_text(np.zeros(4, dtype=int), table), np.tile(table[0], (4, 1)))
    assert np.array_equal(embed_text(np.array([3]), table)[0], table[3])
    with pytest.raises(IndexError):
        embed_text(np.array([5]), table)


def test_embed_gradient_only_touches_looked_up_rows():
    rng = np.random.default_rng(0)
    table = rng.normal(size=(6, 3))
    ids = np.array([1, 4, 1])
    w = rng.normal(size=(3, 3))
    g = embed_text_backward(w, ids, 6)
    assert np.all(g[[0, 2, 3, 5]] == 0)
    f = lambda T: float(np.sum(w * embed_text(ids, T)))
    assert nc.grad_check(f, lambda T: embed_text_backward(w, ids, 6), table) < 1e-6


def test_description_file_round_trip(tmp_path):
    prov = SyntheticProvider({0: (0, 0, 0, 0), 1: (1, 2, 1, 3)})
    lib = build_library(prov, {0: refs(0, 6), 1: refs(1, 6)}, 4, np.random.default_rng(0))
    path = tmp_path / "d.jsonl"
    save_description_file(lib, path)
    assert load_description_file(path) == lib
    for line in path.read_text().splitlines():
        assert set(json.loads(line)) == {"id", "source", "text"}


def test_description_file_merges_duplicates(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": 3, "source": "external", "text": "a"}\n'
                    '{"id": 3, "source": "external", "text": "b"}\n')
    assert load_description_file(path).texts(3) == ["a", "b"]


@pytest.mark.parametrize("field", ["id", "source", "text"])
def test_description_file_missing_field(tmp_path, field):
    rec = {"id": 1, "source": "external", "text": "x"}
    del rec[field]
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": 0, "source": "external", "text": "ok"}\n' + json.dumps(rec) + "\n")
    with pytest.raises(DescriptionFormatError, match=f":2: missing required field '{field}'"):
        load_description_file(path)


def test_description_file_malformed_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(DescriptionFormatError, match=":1:"):
        load_description_file(path)


def test_library_rejects_empty_text():
    with pytest.raises(ValueError):
        DescriptionLibrary().add(0, "  ", "synthetic")


def test_all_attribute_vectors_describe_distinctly():
    combos = list(itertools.product(range(2), range(3), range(3), range(4)))
    assert len({describe_attributes(c) for c in combos}) == 72
