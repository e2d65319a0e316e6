"""Vocabulary construction, encoding, and persistence."""
from __future__ import annotations

import json

import pytest

from model_service.errors import ConfigError
from model_service.tokenizer import (
    CLS_ID,
    MAX_LENGTH,
    PAD_ID,
    UNK_ID,
    Vocabulary,
    tokenize,
)


def test_tokenize_lowercases_and_splits_on_nonalphanumerics():
    assert tokenize("Anti-Itch CREAM, 2oz!") == ["anti", "itch", "cream", "2oz"]
    assert tokenize("") == []
    assert tokenize("---") == []


def test_vocabulary_is_sorted_and_deduplicated():
    vocab = Vocabulary.from_corpus(["beta alpha", "alpha gamma beta"])
    assert vocab.tokens == ("alpha", "beta", "gamma")
    assert vocab.size == 3 + 3  # three specials


def test_encode_prefixes_cls_and_maps_oov_to_unk():
    vocab = Vocabulary.from_corpus(["alpha beta"])
    ids = vocab.encode("beta alpha zzz")
    assert ids[0] == CLS_ID
    assert len(ids) == 4
    assert ids[3] == UNK_ID
    assert PAD_ID not in ids


def test_encode_truncates_to_max_length():
    vocab = Vocabulary.from_corpus(["tok"])
    ids = vocab.encode(" ".join(["tok"] * 500), max_length=16)
    assert len(ids) == 16
    long_ids = vocab.encode(" ".join(["tok"] * 500))
    assert len(long_ids) == MAX_LENGTH


def test_duplicate_tokens_are_rejected():
    with pytest.raises(ConfigError):
        Vocabulary(("alpha", "alpha"))


def test_save_load_roundtrip(tmp_path):
    vocab = Vocabulary.from_corpus(["some words here", "and more words"])
    path = tmp_path / "vocab.json"
    vocab.save(path)
    again = Vocabulary.load(path)
    assert again.tokens == vocab.tokens
    assert again.encode("more words zzz") == vocab.encode("more words zzz")


def test_load_rejects_malformed_files(tmp_path):
    missing = tmp_path / "absent.json"
    with pytest.raises(ConfigError):
        Vocabulary.load(missing)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tokens": [1, 2]}), encoding="utf-8")
    with pytest.raises(ConfigError):
        Vocabulary.load(bad)
    nolist = tmp_path / "nolist.json"
    nolist.write_text(json.dumps({"other": []}), encoding="utf-8")
    with pytest.raises(ConfigError):
        Vocabulary.load(nolist)
