"""Word-level toy tokenizer built from the evaluation corpora."""
from __future__ import annotations

import re
from collections import Counter
from typing import Iterable

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
SPECIALS = (PAD, BOS, EOS, SEP, UNK)

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    """Canonical form that decode(encode(s)) reproduces for in-vocabulary text."""
    return " ".join(split_words(text))


class ToyTokenizer:
    def __init__(self, words: Iterable[str]):
        words = [w for w in words if w not in SPECIALS]
        self.itos: list[str] = list(SPECIALS) + words
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 512) -> "ToyTokenizer":
        """Most frequent words first (ties alphabetical), capped at ``max_size`` ids."""
        counts = Counter(w for t in texts for w in split_words(t))
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ranked[: max(0, max_size - len(SPECIALS))])

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int: return self.stoi[PAD]
    @property
    def bos_id(self) -> int: return self.stoi[BOS]
    @property
    def eos_id(self) -> int: return self.stoi[EOS]
    @property
    def sep_id(self) -> int: return self.stoi[SEP]
    @property
    def unk_id(self) -> int: return self.stoi[UNK]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(w, unk) for w in split_words(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            w = self.itos[i]
            if skip_special and w in SPECIALS:
                continue
            out.append(w)
        return " ".join(out)

    def prompt_ids(self, text: str) -> list[int]:
        """BOS, the text, SEP: the prefix the model answers after."""
        return [self.bos_id, *self.encode(text), self.sep_id]
