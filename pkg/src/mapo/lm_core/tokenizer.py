"""Word-level tokenizer for the toy language models.

Tokens are whitespace-separated surface words (case preserved). Decoding
joins with single spaces and drops special tokens, so encode/decode is the
identity on singly-spaced text whose words are all in the vocabulary.
"""

from __future__ import annotations

import json
from typing import Iterable, Sequence


class WordTokenizer:
    PAD = 0
    BOS = 1
    EOS = 2
    SEP = 3
    UNK = 4
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")

    def __init__(self, words: Iterable[str]):
        vocab = list(self.SPECIALS)
        seen = set(vocab)
        for w in words:
            if w and w not in seen:
                seen.add(w)
                vocab.append(w)
        self._id_to_word = vocab
        self._word_to_id = {w: i for i, w in enumerate(vocab)}

    @property
    def vocab_size(self) -> int:
        return len(self._id_to_word)

    @property
    def words(self) -> list[str]:
        """Non-special vocabulary words, in id order."""
        return self._id_to_word[len(self.SPECIALS):]

    def encode(self, text: str) -> list[int]:
        """Whitespace-split encoding; out-of-vocabulary words map to <unk>."""
        return [self._word_to_id.get(w, self.UNK) for w in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        pieces = []
        for i in ids:
            if i < len(self.SPECIALS):
                continue
            pieces.append(self._id_to_word[i])
        return " ".join(pieces)

    def contains(self, word: str) -> bool:
        return word in self._word_to_id

    def to_json(self) -> str:
        return json.dumps({"words": self.words}, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "WordTokenizer":
        return cls(json.loads(payload)["words"])

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "WordTokenizer":
        """Build a vocabulary from every word appearing in the corpus (sorted)."""
        words = sorted({w for t in texts for w in t.split()})
        return cls(words)
