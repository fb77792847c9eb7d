"""Greedy longest-match tokenizer over characters plus task word pieces."""

from __future__ import annotations

import string
from typing import Iterable, Sequence

PAD, BOS, EOS, IMG = "<pad>", "<bos>", "<eos>", "<img>"
SPECIALS = (PAD, BOS, EOS, IMG)

CHARS = string.ascii_lowercase + string.ascii_uppercase + string.digits + " .,:;?!()*+-=/^'\n"

# generic fallback pieces; task-specific pieces come from taskgen.task_pieces()
PIECES = ("Answer: ", " = ", ". ", " and ")


class TokenizerError(ValueError):
    pass


class Vocab:
    def __init__(self, pieces: Sequence[str] = PIECES, chars: str = CHARS):
        self.tokens: list[str] = list(SPECIALS) + list(chars) + [p for p in pieces if len(p) > 1]
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.alphabet = frozenset(chars)
        self._by_first: dict[str, list[str]] = {}
        for t in self.tokens[len(SPECIALS) :]:
            self._by_first.setdefault(t[0], []).append(t)
        for lst in self._by_first.values():
            lst.sort(key=len, reverse=True)

    pad_id = 0
    bos_id = 1
    eos_id = 2
    img_id = 3

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        out = []
        i = 0
        while i < len(text):
            ch = text[i]
            if ch not in self.alphabet:
                raise TokenizerError(f"character {ch!r} at position {i} is outside the task alphabet")
            for cand in self._by_first[ch]:
                if text.startswith(cand, i):
                    out.append(self.index[cand])
                    i += len(cand)
                    break
        return out

    def detokenize(self, ids: Iterable[int], skip_special: bool = True) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if i < len(SPECIALS):
                if not skip_special:
                    parts.append(SPECIALS[i])
                continue
            parts.append(self.tokens[i])
        return "".join(parts)

    def id_of(self, token: str) -> int:
        return self.index[token]

    @property
    def letter_ids(self) -> list[int]:
        return [self.index[c] for c in "ABCD"]
