"""Corpus-derived tokenization for the classifier.

There is deliberately no pretrained wordpiece model here: the service
trains from random initialization on whatever labeled corpus it is
given, so the vocabulary is built from that corpus's training split
and ships inside the checkpoint.  Unknown tokens at inference map to
[UNK] rather than erroring.
"""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError

_TOKEN_RE = re.compile(r"[a-z0-9]+")

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
_NUM_SPECIALS = 3

MAX_LENGTH = 256


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self._index = {t: i + _NUM_SPECIALS for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens) + _NUM_SPECIALS

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Vocabulary":
        return cls(sorted({t for text in texts for t in tokenize(text)}))

    def encode(self, text: str, max_length: int = MAX_LENGTH) -> list[int]:
        """[CLS] plus token ids, truncated to max_length positions."""
        ids = [CLS_ID]
        for token in tokenize(text):
            if len(ids) >= max_length:
                break
            ids.append(self._index.get(token, UNK_ID))
        return ids

    def save(self, path: Path) -> None:
        payload = {"tokens": list(self.tokens)}
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            tokens = payload["tokens"]
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read vocabulary from {path}: {exc}") from exc
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise ConfigError(f"vocabulary file {path} is not a list of strings")
        return cls(tokens)
