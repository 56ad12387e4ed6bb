"""Task-scoring metrics used for optimal-prompt search and evaluation.

Three task metrics (token F1 for question answering, exact-match accuracy
for classification, ROUGE-L for generation) plus the character-level
normalized edit distance used to quantify how much optimization changed a
prompt. All scores lie in [0, 1]. Everything here is a pure function over
immutable inputs and safe to call from any thread.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

_PUNCT = re.compile(r"[^\w\s]+", re.UNICODE)


class TaskKind(Enum):
    QUESTION_ANSWERING = "qa"
    CLASSIFICATION = "classification"
    GENERATION = "generation"


@dataclass(frozen=True)
class TokenizedText:
    """Lowercased, punctuation-stripped, whitespace-split view of a string."""

    source_text: str
    tokens: tuple[str, ...]


def tokenize(text: str) -> TokenizedText:
    """Deterministic word tokenization: strip punctuation, lowercase, split."""
    cleaned = _PUNCT.sub(" ", text.lower())
    return TokenizedText(source_text=text, tokens=tuple(cleaned.split()))


def lcs_length(a: TokenizedText, b: TokenizedText) -> int:
    """Length of the longest common subsequence of the two token sequences."""
    return _lcs(a.tokens, b.tokens)


def _lcs(x: Sequence[str], y: Sequence[str]) -> int:
    # Two-row DP keeps memory linear in the shorter sequence.
    if len(x) < len(y):
        x, y = y, x
    if not y:
        return 0
    prev = [0] * (len(y) + 1)
    for xi in x:
        curr = [0]
        for j, yj in enumerate(y, start=1):
            if xi == yj:
                curr.append(prev[j - 1] + 1)
            else:
                curr.append(max(prev[j], curr[j - 1]))
        prev = curr
    return prev[-1]


def rouge_l(candidate: TokenizedText, reference: TokenizedText, beta: float = 1.0) -> float:
    """ROUGE-L F-measure over the LCS of candidate and reference tokens.

    beta weights recall; the default 1.0 gives the plain harmonic mean.
    Returns 0.0 when either side is empty or the LCS is empty.
    """
    if not candidate.tokens or not reference.tokens:
        return 0.0
    lcs = _lcs(candidate.tokens, reference.tokens)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate.tokens)
    recall = lcs / len(reference.tokens)
    b2 = beta * beta
    return (1.0 + b2) * precision * recall / (recall + b2 * precision)


def token_f1(prediction: TokenizedText, gold: TokenizedText) -> float:
    """Bag-of-tokens F1 with multiplicity (minimum per-token counts)."""
    if not prediction.tokens or not gold.tokens:
        return 0.0
    overlap = sum((Counter(prediction.tokens) & Counter(gold.tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(prediction.tokens)
    recall = overlap / len(gold.tokens)
    return 2.0 * precision * recall / (precision + recall)


def exact_match_accuracy(prediction: str, gold: str) -> float:
    """1.0 iff the trimmed, casefolded label strings are equal."""
    return 1.0 if prediction.strip().casefold() == gold.strip().casefold() else 0.0


def exact_match_accuracy_batch(items: Iterable[tuple[str, str]]) -> float:
    """Mean exact-match accuracy over (prediction, gold) pairs."""
    items = list(items)
    if not items:
        return 0.0
    return sum(exact_match_accuracy(p, g) for p, g in items) / len(items)


def normalized_edit_distance(a: str, b: str, divisor: str = "max") -> float:
    """Character-level Levenshtein distance scaled into [0, 1].

    divisor="max" divides by max(|a|, |b|), which guarantees the result
    stays in [0, 1] even when one string is empty; divisor="mean" divides
    by the average length. Two empty strings give 0.0.
    """
    if not a and not b:
        return 0.0
    dist = levenshtein(a, b)
    if divisor == "max":
        denom = max(len(a), len(b))
    elif divisor == "mean":
        denom = (len(a) + len(b)) / 2.0
    else:
        raise ValueError(f"unknown divisor {divisor!r}")
    return dist / denom


def levenshtein(a: str, b: str) -> int:
    """Raw character-level edit distance (insert/delete/substitute, unit costs)."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        curr = [i]
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            curr.append(min(prev[j] + 1, curr[j - 1] + 1, prev[j - 1] + cost))
        prev = curr
    return prev[-1]


def score_for_task(task: TaskKind, prediction: str, reference: str) -> float:
    """Dispatch to the metric each task kind uses for match-degree scoring."""
    if task is TaskKind.QUESTION_ANSWERING:
        return token_f1(tokenize(prediction), tokenize(reference))
    if task is TaskKind.CLASSIFICATION:
        return exact_match_accuracy(prediction, reference)
    if task is TaskKind.GENERATION:
        return rouge_l(tokenize(prediction), tokenize(reference))
    raise ValueError(f"unknown task kind {task!r}")
