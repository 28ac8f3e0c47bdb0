"""Whitespace-word tokenizer with character fallback.

Known whole words map to single ids. An unknown word falls back to its
characters: the first character is emitted as a plain single-char token and
the rest carry a ``##`` continuation prefix, so detokenization can rebuild
word boundaries exactly. Characters outside the vocabulary map to the unk
token, which detokenizes visibly as ``<unk>``.

The vocabulary file is one token per line (UTF-8) with the special tokens
first, in fixed order, followed by the remaining tokens sorted.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

# <eos> deliberately takes id 0: greedy decoding breaks ties toward the
# lowest id, so a run of all-equal logits halts immediately.
SPECIAL_TOKENS = ("<eos>", "<pad>", "<bos>", "<unk>", "<emb_start>", "<emb>", "<emb_stop>")

CONT_PREFIX = "##"


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        """``tokens`` are the non-special entries, already deduplicated."""
        ordered = list(SPECIAL_TOKENS) + sorted(set(tokens) - set(SPECIAL_TOKENS))
        self._tokens = ordered
        self._ids = {tok: i for i, tok in enumerate(ordered)}
        if len(self._ids) != len(ordered):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        """Collect word tokens plus per-character fallback tokens."""
        tokens: set[str] = set()
        for text in texts:
            for word in text.split():
                tokens.add(word)
                for ch in word:
                    tokens.add(ch)
                    tokens.add(CONT_PREFIX + ch)
        return cls(sorted(tokens))

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def eos_id(self) -> int:
        return 0

    @property
    def pad_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def emb_start_id(self) -> int:
        return 4

    @property
    def emb_id(self) -> int:
        return 5

    @property
    def emb_stop_id(self) -> int:
        return 6

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            wid = self._ids.get(word)
            if wid is not None:
                ids.append(wid)
                continue
            for pos, ch in enumerate(word):
                key = ch if pos == 0 else CONT_PREFIX + ch
                ids.append(self._ids.get(key, self.unk_id))
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = False) -> str:
        words: list[str] = []
        for idx in ids:
            tok = self._tokens[idx]
            if skip_special and idx < len(SPECIAL_TOKENS):
                continue
            if tok.startswith(CONT_PREFIX) and words:
                words[-1] += tok[len(CONT_PREFIX) :]
            else:
                words.append(tok)
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: vocabulary file must start with the special tokens")
        return cls(lines[len(SPECIAL_TOKENS) :])
