import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafe_micro.data import generate_scene, make_scene, render_caption
from cafe_micro.errors import ArgumentError, UnknownWordError
from cafe_micro.prompting import grammar_words
from cafe_micro.tokenizer import N_SPECIALS, SPECIALS, build_vocab, decode, encode


@pytest.fixture
def small_vocab():
    return build_vocab(["a red square"])


def test_specials_fixed_ids():
    v = build_vocab(["x"])
    assert v.words[:7] == SPECIALS
    assert SPECIALS.index("<pad>") == 0 and SPECIALS.index("<image>") == 3


def test_build_vocab_orders_words_after_specials(small_vocab):
    assert [small_vocab.id_of(w) for w in ("a", "red", "square")] == [7, 8, 9]
    assert len(small_vocab) == 10


def test_build_vocab_deterministic():
    corpus = ["the blue circle", "a red square"]
    assert build_vocab(corpus) == build_vocab(list(corpus))


def test_build_vocab_empty_corpus():
    with pytest.raises(ArgumentError):
        build_vocab([])


def test_grammar_vocab_size_matches_enumeration():
    # enumerate every one-object caption, plus one two-object caption for the joiner
    captions = [
        render_caption(make_scene([(c, s, r, k)]))
        for c in ("red", "green", "blue", "yellow")
        for s in ("square", "circle", "triangle")
        for r in range(3)
        for k in range(3)
    ]
    captions.append(render_caption(make_scene([("red", "square", 0, 0), ("red", "square", 0, 1)])))
    words = {w for c in captions for w in c.split()}
    v = build_vocab(captions)
    assert len(v) == 7 + len(words) == 7 + 15
    assert set(grammar_words()) == words


def test_roundtrip(small_vocab):
    ids = encode(small_vocab, "a red square")
    assert ids == [7, 8, 9]
    assert decode(small_vocab, ids) == "a red square"


def test_empty_text(small_vocab):
    assert encode(small_vocab, "") == []
    assert decode(small_vocab, []) == ""


def test_unknown_word_named(small_vocab):
    with pytest.raises(UnknownWordError, match="zzz"):
        encode(small_vocab, "a zzz square")


def test_specials_not_encodable(small_vocab):
    with pytest.raises(UnknownWordError):
        encode(small_vocab, "a <image>")


def test_normalization(small_vocab):
    assert encode(small_vocab, "  A   Red\tsquare ") == [7, 8, 9]


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_caption_roundtrip_property(seed):
    v = build_vocab([" ".join(grammar_words())])
    caption = render_caption(generate_scene(np.random.default_rng(seed)))
    ids = encode(v, caption)
    assert min(ids) >= N_SPECIALS
    assert decode(v, ids) == caption
