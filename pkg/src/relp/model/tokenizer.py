from __future__ import annotations

import re
from typing import Iterable, Mapping

_WORD = re.compile(r"\w+|[^\w\s]")


class TokenizerError(KeyError):
    pass


class WordTokenizer:
    """Closed-vocabulary word tokenizer; punctuation marks are separate tokens."""

    def __init__(self, vocab: Iterable[str]):
        self.vocab = list(dict.fromkeys(vocab))
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def from_texts(cls, texts: Iterable[str], extra: Iterable[str] = ()) -> "WordTokenizer":
        words: dict[str, None] = {}
        for t in texts:
            for w in split_words(t):
                words.setdefault(w)
        for w in extra:
            words.setdefault(w)
        return cls(sorted(words))

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        out = []
        for w in split_words(text):
            try:
                out.append(self.index[w])
            except KeyError:
                raise TokenizerError(f"word {w!r} not in vocabulary") from None
        return out

    def token_id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise TokenizerError(f"word {word!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[int(i)] for i in ids)

    def to_dict(self) -> dict[str, int]:
        return dict(self.index)

    @classmethod
    def from_dict(cls, table: Mapping[str, int]) -> "WordTokenizer":
        vocab = [None] * len(table)
        for w, i in table.items():
            vocab[i] = w
        if any(v is None for v in vocab):
            raise ValueError("vocabulary ids must be contiguous from 0")
        return cls(vocab)


def split_words(text: str) -> list[str]:
    return _WORD.findall(text)
