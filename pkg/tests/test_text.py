import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from connalign.errors import ConfigError, ValidationError
from connalign.text import (
    CLS_ID,
    PAD_ID,
    RESERVED,
    UNK_ID,
    TextEncoder,
    Vocabulary,
    build_vocab,
    compose_narrative,
    detokenize,
    report_from_fields,
    split_words,
    tokenize,
)

FIELDS = {"age": 72, "sex": "female", "education": 16, "apoe4": 1, "mmse": 27, "cdr": 0.5, "notes": "stable"}


def test_narrative_template():
    assert compose_narrative(FIELDS) == (
        "age 72. sex female. education 16 years. apoe4 1. mmse 27. cdr 0.5. notes: stable"
    )


def test_narrative_all_missing_is_tokenizable():
    text = compose_narrative({})
    assert text.count("unknown") == 7
    vocab = build_vocab([text])
    ids, mask = tokenize(text, vocab, 32)
    assert ids[0] == CLS_ID and mask.sum() > 1


def test_narrative_deterministic():
    assert compose_narrative(FIELDS).encode() == compose_narrative(dict(FIELDS)).encode()


def test_clinical_terms_joined():
    text = compose_narrative({**FIELDS, "notes": "elevated Phosphorylated tau and amyloid-beta; hippocampal  atrophy"})
    words = split_words(text)
    assert "phosphorylated_tau" in words
    assert "amyloid_beta" in words
    assert "hippocampal_atrophy" in words


def test_integral_floats_print_as_ints():
    assert "mmse 27." in compose_narrative({**FIELDS, "mmse": 27.0})


def test_split_keeps_underscores():
    assert split_words("Amyloid_Beta, tau.") == ["amyloid_beta", "tau"]


def test_vocab_frequency_order():
    v = build_vocab(["a a b"], min_freq=1)
    assert v.tokens == list(RESERVED) + ["a", "b"]
    assert build_vocab(["a a b"], min_freq=2).tokens == list(RESERVED) + ["a"]


def test_vocab_ties_are_lexicographic():
    assert build_vocab(["c b a b c a"]).tokens[3:] == ["a", "b", "c"]


def test_vocab_deterministic_and_bijective():
    corpus = ["the cat sat", "the dog sat down", "a cat"]
    a, b = build_vocab(corpus), build_vocab(corpus)
    assert a.tokens == b.tokens
    assert all(a.tokens[a.id(t)] == t for t in a.tokens)


def test_vocab_empty_corpus():
    with pytest.raises(ValidationError):
        build_vocab([])


def test_vocab_save_load(tmp_path):
    v = build_vocab(["x y y z"])
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens


def test_vocab_requires_reserved_prefix():
    with pytest.raises(ValidationError):
        Vocabulary(["a", "b"])


def test_tokenize_empty_text():
    ids, mask = tokenize("", build_vocab(["a"]), 5)
    assert ids.tolist() == [CLS_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]
    assert mask.tolist() == [True, False, False, False, False]


def test_tokenize_truncates_from_end():
    vocab = build_vocab(["a b c d e f"])
    ids, mask = tokenize("a b c d e f", vocab, 4)
    assert len(ids) == 4 and mask.all()
    assert detokenize(ids, vocab) == "a b c"


def test_tokenize_unknown():
    ids, _ = tokenize("a zebra", build_vocab(["a"]), 4)
    assert ids[2] == UNK_ID


def test_tokenize_bad_length():
    with pytest.raises(ConfigError):
        tokenize("a", build_vocab(["a"]), 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["mmse", "tau", "amyloid_beta", "notes", "stable", "x1"]), min_size=0, max_size=10))
def test_tokenize_detokenize_round_trip(words):
    vocab = build_vocab(["mmse tau amyloid_beta notes stable x1"])
    ids, mask = tokenize(" ".join(words), vocab, 16)
    assert detokenize(ids, vocab) == " ".join(words)
    assert mask.sum() == len(words) + 1


def test_report_from_fields():
    rep = report_from_fields("s1", {"age": 70, "notes": None})
    assert rep.structured["notes"] is None
    assert rep.raw_text.endswith("notes: unknown")
    tok = rep.tokenized(build_vocab([rep.raw_text]), 20)
    assert tok.token_ids[0] == CLS_ID and len(tok.token_ids) == len(tok.mask) == 20


def encoder(rng, layers=2):
    enc = TextEncoder(10, 12, 16, layers, 2, rng)
    for _, p in enc.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.3
    return enc


def test_encode_shapes(rng):
    enc = encoder(rng)
    ids = np.array([CLS_ID, 3, 4, 5] + [PAD_ID] * 8)
    mask = ids != PAD_ID
    mask[0] = True
    v_local, v_global = enc.encode_text(ids, mask)
    assert v_local.shape == (11, 16) and v_global.shape == (1, 16)
    assert not v_local.data[3:].any()


def test_padding_length_invariance(rng):
    enc = encoder(rng)
    short = np.array([CLS_ID, 3, 4, 5, PAD_ID])
    long = np.array([CLS_ID, 3, 4, 5] + [PAD_ID] * 8)
    a_local, a_global = enc.encode_text(short, short != PAD_ID)
    b_local, b_global = enc.encode_text(long, long != PAD_ID)
    assert np.abs(a_global.data - b_global.data).max() <= 1e-10
    assert np.abs(a_local.data[:3] - b_local.data[:3]).max() <= 1e-10


def test_zero_layers_give_cls_embedding(rng):
    enc = encoder(rng)
    for layer in enc.layers:
        layer.msa.zero_()
        layer.mlp.zero_()
    ids = np.array([CLS_ID, 3, 4])
    _, v_global = enc.encode_text(ids, np.ones(3, dtype=bool))
    np.testing.assert_array_equal(v_global.data[0], enc.token_embed.data[CLS_ID] + enc.pos_embed.data[0])


def test_out_of_range_id(rng):
    enc = encoder(rng)
    with pytest.raises(IndexError):
        enc.encode_text(np.array([CLS_ID, 10]), np.ones(2, dtype=bool))


def test_sequence_too_long(rng):
    enc = encoder(rng)
    with pytest.raises(ConfigError):
        enc.encode_text(np.full(13, 3), np.ones(13, dtype=bool))
