"""Deterministic stand-ins for the remote oracle and target models.

StubParaphraser produces seeded surface rewrites (synonym swaps, word
reorders, politeness inserts) that keep at least 80% of the original's
content-token multiset. TemplateTarget is a scripted "target LLM" whose
answer quality depends on how many hidden preference words the prompt
contains — the planted signal the reward model has to discover.
"""

from __future__ import annotations

import hashlib
import math
import random
from typing import Iterable, Mapping, Sequence

DEFAULT_SYNONYMS: dict[str, str] = {
    "describe": "depict",
    "show": "display",
    "list": "enumerate",
    "big": "large",
    "small": "little",
    "quick": "fast",
    "story": "tale",
    "picture": "image",
    "answer": "reply",
    "choose": "pick",
}

DEFAULT_POLITENESS = ("please", "kindly")


def _bidirectional(table: Mapping[str, str]) -> dict[str, str]:
    full = dict(table)
    for k, v in table.items():
        full.setdefault(v, k)
    return full


class StubParaphraser:
    """Seeded deterministic surface rewriter standing in for the oracle LLM.

    rewrite(original, i) is a pure function of (seed, original, i), so
    repeated calls and extended draws are reproducible. At most
    floor(n_tokens / 5) tokens are synonym-substituted per rewrite, keeping
    the content-token multiset overlap with the original at >= 80%.
    """

    def __init__(
        self,
        seed: int,
        synonyms: Mapping[str, str] | None = None,
        politeness: Sequence[str] = DEFAULT_POLITENESS,
    ):
        self.seed = seed
        self.synonyms = _bidirectional(DEFAULT_SYNONYMS if synonyms is None else synonyms)
        self.politeness = tuple(politeness)

    def rewrites(self, original: str, n: int) -> list[str]:
        return [self.rewrite(original, i) for i in range(n)]

    def rewrite(self, original: str, index: int) -> str:
        rng = self._rng(original, index)
        words = original.split()
        if not words:
            return self.politeness[index % len(self.politeness)]
        swap_budget = len(words) // 5
        ops = []
        if swap_budget > 0 and rng.random() < 0.5:
            ops.append("synonym")
        if rng.random() < 0.6:
            ops.append(rng.choice(["transpose", "rotate"]))
        if rng.random() < 0.5:
            ops.append("insert")
        out = list(words)
        for op in ops:
            out = self._apply(op, out, rng)
        if out == words:
            out = self._apply("transpose", out, rng)
        if out == words:  # single-word input: transposition is a no-op
            out = self._apply("insert", out, rng)
        return " ".join(out)

    def _apply(self, op: str, words: list[str], rng: random.Random) -> list[str]:
        out = list(words)
        if op == "synonym":
            candidates = [i for i, w in enumerate(out) if w in self.synonyms]
            if candidates:
                i = rng.choice(candidates)
                out[i] = self.synonyms[out[i]]
        elif op == "transpose" and len(out) >= 2:
            i = rng.randrange(len(out) - 1)
            out[i], out[i + 1] = out[i + 1], out[i]
        elif op == "rotate" and len(out) >= 3:
            out = out[1:] + out[:1]
        elif op == "insert":
            count = 1 + (rng.random() < 0.5) + (rng.random() < 0.25)
            for _ in range(count):
                word = rng.choice(self.politeness)
                pos = rng.choice([0, len(out)])
                out.insert(pos, word)
        return out

    def _rng(self, original: str, index: int) -> random.Random:
        digest = hashlib.sha256(f"{self.seed}|{index}|{original}".encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))


class TemplateTarget:
    """Scripted target model with a hidden prompt preference.

    The prompt's quality is the fraction of hidden template words it
    mentions. The reply reveals that fraction of the prompt's content words
    (everything that is neither an instruction word nor a template word),
    so downstream match-degree scores rise monotonically with the number
    of template words in the prompt. Fully deterministic.
    """

    def __init__(
        self,
        template_words: Sequence[str],
        instruction_words: Iterable[str] = (),
    ):
        if not template_words:
            raise ValueError("template_words must be non-empty")
        self.template_words = tuple(template_words)
        self.instruction_words = frozenset(instruction_words)

    def quality(self, prompt: str) -> float:
        present = {w for w in prompt.split() if w in self.template_words}
        return len(present) / len(self.template_words)

    def content_words(self, prompt: str) -> list[str]:
        skip = self.instruction_words | set(self.template_words)
        return [w for w in prompt.split() if w not in skip]

    def generate_text(self, prompt: str, max_tokens: int) -> str:
        content = self.content_words(prompt)
        reveal = math.ceil(self.quality(prompt) * len(content))
        return " ".join(content[:reveal][:max_tokens])
