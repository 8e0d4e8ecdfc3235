import itertools
import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expertmerge.embedding import (
    EmbedderConfig,
    bucket_sign,
    cosine,
    embed,
    embed_corpus,
    ngrams,
)

CFG = EmbedderConfig(dim=64, ngram_orders=(2, 3), hash_seed=123)


def test_config_validation():
    with pytest.raises(ValueError):
        EmbedderConfig(dim=4)
    with pytest.raises(ValueError):
        EmbedderConfig(ngram_orders=())
    with pytest.raises(ValueError):
        EmbedderConfig(ngram_orders=(0,))


def test_embed_deterministic():
    a = embed(CFG, "abc")
    b = embed(CFG, "abc")
    assert a.dtype == np.float32
    assert np.array_equal(a, b)


def test_empty_text_rejected():
    with pytest.raises(ValueError, match="empty sequence"):
        embed(CFG, "")


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet=string.printable, min_size=1, max_size=40))
def test_unit_norm_property(text):
    vec = embed(CFG, text)
    assert abs(float(np.linalg.norm(vec.astype(np.float64))) - 1.0) <= 1e-6


def test_disjoint_bucket_texts_are_orthogonal():
    # oracle: enumerate the hash buckets of candidate texts and pick two
    # whose bucket sets do not intersect
    def buckets(text):
        return {bucket_sign(CFG, g)[0] for g in ngrams(text, CFG.ngram_orders)}

    candidates = ["".join(p) for p in itertools.permutations("abcd", 3)]
    pair = None
    for s, t in itertools.combinations(candidates, 2):
        if not (buckets(s) & buckets(t)):
            pair = (s, t)
            break
    assert pair is not None, "no disjoint-bucket pair among candidates"
    assert cosine(embed(CFG, pair[0]), embed(CFG, pair[1])) == pytest.approx(0.0, abs=1e-7)


def test_degenerate_embedding_rejected():
    # orders (1,) on a two-char text whose chars hash to the same bucket
    # with opposite signs gives an exactly zero sum
    cfg = EmbedderConfig(dim=8, ngram_orders=(1,), hash_seed=7)
    alphabet = string.ascii_letters + string.digits
    found = None
    for a, b in itertools.combinations(alphabet, 2):
        ba, sa = bucket_sign(cfg, a)
        bb, sb = bucket_sign(cfg, b)
        if ba == bb and sa == -sb:
            found = a + b
            break
    assert found is not None
    with pytest.raises(ValueError, match="degenerate embedding"):
        embed(cfg, found)


def test_short_text_still_embeds():
    # text shorter than every order contributes the whole string
    vec = embed(CFG, "a")
    assert abs(float(np.linalg.norm(vec)) - 1.0) <= 1e-6


def test_embed_corpus_stacks():
    mat = embed_corpus(CFG, ["abc", "def"])
    assert mat.shape == (2, CFG.dim)
    assert np.array_equal(mat[0], embed(CFG, "abc"))


def test_cosine_identity_antipodal_orthogonal():
    v = embed(CFG, "hello world")
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-7)
    assert cosine(v, -v) == pytest.approx(-1.0, abs=1e-7)
    e1 = np.zeros(8, dtype=np.float32)
    e2 = np.zeros(8, dtype=np.float32)
    e1[0] = 1.0
    e2[1] = 1.0
    assert cosine(e1, e2) == 0.0


def test_cosine_symmetric_exactly():
    a = embed(CFG, "first text")
    b = embed(CFG, "second text")
    assert cosine(a, b) == cosine(b, a)
