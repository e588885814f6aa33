"""Closed-vocabulary word-level tokenizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ArgumentError, UnknownWordError

PAD, BOS, EOS, IMG, SYS, HUM, ASST = range(7)
SPECIALS = ("<pad>", "<bos>", "<eos>", "<image>", "<sys>", "<human>", "<assistant>")
N_SPECIALS = len(SPECIALS)


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.words[:N_SPECIALS]) != SPECIALS:
            raise ArgumentError("vocabulary must start with the reserved special tokens")
        index = {w: i for i, w in enumerate(self.words)}
        if len(index) != len(self.words):
            raise ArgumentError("duplicate words in vocabulary")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        i = self._index.get(word)
        if i is None or i < N_SPECIALS:
            raise UnknownWordError(word)
        return i

    def encode(self, text: str) -> list[int]:
        return [self.id_of(w) for w in normalize(text).split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)

    def to_list(self) -> list[str]:
        return list(self.words)

    @classmethod
    def from_list(cls, words: Iterable[str]) -> Vocab:
        return cls(tuple(words))


def build_vocab(corpus: Sequence[str]) -> Vocab:
    """Specials followed by every distinct lowercase word of ``corpus``, sorted."""
    if not corpus:
        raise ArgumentError("cannot build a vocabulary from an empty corpus")
    words = sorted({w for text in corpus for w in normalize(text).split()})
    clash = set(words) & set(SPECIALS)
    if clash:
        raise ArgumentError(f"corpus contains reserved tokens: {sorted(clash)}")
    return Vocab(SPECIALS + tuple(words))


def encode(vocab: Vocab, text: str) -> list[int]:
    return vocab.encode(text)


def decode(vocab: Vocab, ids: Sequence[int]) -> str:
    return vocab.decode(ids)
