"""Word-level tokenisation and vocabularies."""
from __future__ import annotations

import string
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .errors import ConfigError

PAD, BOS, EOS, UNK = "<PAD>", "<BOS>", "<EOS>", "<UNK>"
RESERVED = (PAD, BOS, EOS, UNK)

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def normalize(text: str) -> List[str]:
    """Lowercase, punctuation to whitespace, split."""
    return text.lower().translate(_PUNCT).split()


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise ConfigError(f"vocabulary must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self.tokens: List[str] = list(tokens)
        self.index: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines())


def build_vocab(captions: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Tokens with count >= min_count, indexed by (count desc, token asc) after the reserved four."""
    captions = list(captions)
    if not captions:
        raise ConfigError("cannot build a vocabulary from an empty caption list")
    counts = Counter(tok for cap in captions for tok in normalize(cap))
    kept = sorted((tok for tok, n in counts.items() if n >= min_count and tok not in RESERVED),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary(list(RESERVED) + kept)


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    return [vocab.index.get(tok, vocab.unk) for tok in normalize(text)]


def detokenize(indices: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    for i in indices:
        if i == vocab.eos:
            break
        if i in (vocab.pad, vocab.bos):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0, length: int = 0) -> np.ndarray:
    width = max(length, max(len(s) for s in seqs))
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def label_to_text(label: str) -> str:
    """Class label to text query: every underscore becomes a blank."""
    return label.replace("_", " ")
