"""Warm-up dataset construction.

For each original prompt: draw candidate paraphrases from the oracle, run
each through the target model, score outputs against the reference with
the task metric, pick the best candidate as the optimized prompt (falling
back to the original when nothing beats it), and keep the full scored
ranking sequence for reward-model training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from mapo.errors import MapoError
from mapo.lm_core.policy import (
    GenerationParams,
    PolicyHandle,
    generate,
    paraphrase,
    prompt_sequence,
)
from mapo.text_metrics import TaskKind, score_for_task


@dataclass(frozen=True)
class PromptPair:
    original: str
    optimized: str
    task: TaskKind
    dataset_name: str
    reference_output: str
    score_original: float
    score_optimized: float


@dataclass(frozen=True)
class ScoredCandidate:
    prompt_text: str
    generated_output: str
    score: float
    failed: bool = False


@dataclass(frozen=True)
class RankingSequence:
    """Candidates plus the original, sorted ascending by score."""

    entries: tuple[ScoredCandidate, ...]
    original_index: int

    @property
    def k(self) -> int:
        return len(self.entries) - 1


def generate_candidates(
    oracle: PolicyHandle, original: str, n: int, retry_budget: int = 8
) -> list[str]:
    """n candidate paraphrases, deduplicated with replacement draws.

    Extra draws replace duplicates up to retry_budget additional samples;
    if the oracle cannot produce enough distinct rewrites, duplicates are
    kept so the count contract still holds.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    drawn = paraphrase(oracle, original, n)
    unique = list(dict.fromkeys(drawn))
    if len(unique) < n and retry_budget > 0:
        extended = paraphrase(oracle, original, n + retry_budget)
        unique = list(dict.fromkeys(extended))
    if len(unique) >= n:
        return unique[:n]
    # Pad with the original draws (duplicates kept).
    padded = unique + [c for c in drawn if len(unique) < n]
    return padded[:n]


def score_candidates(
    target: PolicyHandle,
    candidates: list[str],
    task: TaskKind,
    reference: str,
    params: GenerationParams,
) -> list[ScoredCandidate]:
    """Run each candidate through the target model and score its output."""
    if not reference:
        raise ValueError("reference must be non-empty")
    scored = []
    for candidate in candidates:
        try:
            output = generate(target, prompt_sequence(target.tokenizer, candidate), params)
            scored.append(
                ScoredCandidate(candidate, output.text, score_for_task(task, output.text, reference))
            )
        except MapoError:
            scored.append(ScoredCandidate(candidate, "", 0.0, failed=True))
    return scored


def search_optimal(
    original: str,
    scored: list[ScoredCandidate],
    score_original: float,
    task: TaskKind = TaskKind.GENERATION,
    dataset_name: str = "",
    reference_output: str = "",
) -> PromptPair:
    """Select the best-scoring candidate; identity pair when none beats P.

    Ties among candidates break toward the shorter prompt text, then
    lexicographically, so the search is fully deterministic.
    """
    if not scored:
        raise ValueError("scored candidates must be non-empty")
    best = min(scored, key=lambda c: (-c.score, len(c.prompt_text), c.prompt_text))
    if best.score <= score_original:
        optimized, score_opt = original, score_original
    else:
        optimized, score_opt = best.prompt_text, best.score
    return PromptPair(
        original=original,
        optimized=optimized,
        task=task,
        dataset_name=dataset_name,
        reference_output=reference_output,
        score_original=score_original,
        score_optimized=score_opt,
    )


def build_ranking_sequence(
    original: ScoredCandidate, scored: list[ScoredCandidate]
) -> RankingSequence:
    """Stable ascending sort of candidates plus the original.

    Equal scores keep input order, with the original placed after any
    equal-scored candidates.
    """
    if not scored:
        raise ValueError("scored candidates must be non-empty")
    combined = list(scored) + [original]
    order = sorted(range(len(combined)), key=lambda i: combined[i].score)
    entries = tuple(combined[i] for i in order)
    original_index = order.index(len(combined) - 1)
    return RankingSequence(entries=entries, original_index=original_index)


def enumerate_ranking_pairs(
    seq: RankingSequence,
) -> list[tuple[ScoredCandidate, ScoredCandidate]]:
    """All (winner, loser) pairs with strictly greater winner score."""
    if len(seq.entries) < 2:
        raise ValueError("ranking sequence needs at least two entries")
    pairs = []
    for j in range(len(seq.entries)):
        for i in range(j):
            if seq.entries[j].score > seq.entries[i].score:
                pairs.append((seq.entries[j], seq.entries[i]))
    return pairs


def build_warmup_record(
    original: str,
    task: TaskKind,
    dataset_name: str,
    reference: str,
    oracle: PolicyHandle,
    target: PolicyHandle,
    n_candidates: int,
    params: GenerationParams,
) -> tuple[PromptPair, RankingSequence]:
    """Full warm-up construction for one original prompt."""
    candidates = generate_candidates(oracle, original, n_candidates)
    scored = score_candidates(target, candidates, task, reference, params)
    original_out = generate(target, prompt_sequence(target.tokenizer, original), params)
    score_original = score_for_task(task, original_out.text, reference)
    pair = search_optimal(original, scored, score_original, task, dataset_name, reference)
    original_entry = ScoredCandidate(original, original_out.text, score_original)
    sequence = build_ranking_sequence(original_entry, scored)
    return pair, sequence


TASK_TO_WIRE = {
    TaskKind.QUESTION_ANSWERING: "qa",
    TaskKind.CLASSIFICATION: "classification",
    TaskKind.GENERATION: "generation",
}
WIRE_TO_TASK = {v: k for k, v in TASK_TO_WIRE.items()}


def emit_warmup_dataset(
    pairs: list[PromptPair],
    sequences: list[RankingSequence],
    path: Path,
    split_counts: dict[str, int] | None = None,
) -> "int | dict[str, int]":
    """Write one JSONL record per prompt pair; returns record counts.

    Candidates are stored in ranking order (original excluded) so the
    paired loader can rebuild the ranking sequence losslessly. With
    split_counts (e.g. {"train": 4957, "val": 500, "test": 500}) the
    records are partitioned in order into one file per split, named
    <stem>.<split><suffix>, and the per-split counts are returned.
    """
    if len(pairs) != len(sequences):
        raise ValueError("pairs and sequences must be parallel lists")
    path = Path(path)
    if split_counts is None:
        _write_records(path, pairs, sequences)
        return len(pairs)
    if sum(split_counts.values()) != len(pairs):
        raise ValueError(
            f"split counts sum to {sum(split_counts.values())} but there are {len(pairs)} pairs"
        )
    counts = {}
    cursor = 0
    for split, n in split_counts.items():
        split_path = path.with_name(f"{path.stem}.{split}{path.suffix}")
        _write_records(split_path, pairs[cursor : cursor + n], sequences[cursor : cursor + n])
        counts[split] = n
        cursor += n
    return counts


def _write_records(path: Path, pairs, sequences) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for pair, seq in zip(pairs, sequences):
            record = {
                "task": TASK_TO_WIRE[pair.task],
                "dataset": pair.dataset_name,
                "original": pair.original,
                "optimized": pair.optimized,
                "reference": pair.reference_output,
                "score_original": pair.score_original,
                "score_optimized": pair.score_optimized,
                "candidates": [
                    {"text": e.prompt_text, "score": e.score}
                    for i, e in enumerate(seq.entries)
                    if i != seq.original_index
                ],
            }
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def load_warmup_dataset(path: Path) -> tuple[list[PromptPair], list[RankingSequence]]:
    """Load pairs and ranking sequences back from a warm-up JSONL file."""
    pairs: list[PromptPair] = []
    sequences: list[RankingSequence] = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        record = json.loads(line)
        _validate_record(record, line_no)
        task = WIRE_TO_TASK[record["task"]]
        pair = PromptPair(
            original=record["original"],
            optimized=record["optimized"],
            task=task,
            dataset_name=record["dataset"],
            reference_output=record["reference"],
            score_original=record["score_original"],
            score_optimized=record["score_optimized"],
        )
        candidates = [
            ScoredCandidate(c["text"], "", c["score"]) for c in record["candidates"]
        ]
        original_entry = ScoredCandidate(record["original"], "", record["score_original"])
        pairs.append(pair)
        sequences.append(build_ranking_sequence(original_entry, candidates))
    return pairs, sequences


_REQUIRED_KEYS = {
    "task": str,
    "dataset": str,
    "original": str,
    "optimized": str,
    "reference": str,
    "score_original": (int, float),
    "score_optimized": (int, float),
    "candidates": list,
}


def _validate_record(record: dict, line_no: int) -> None:
    for key, kind in _REQUIRED_KEYS.items():
        if key not in record:
            raise ValueError(f"warm-up record line {line_no}: missing key {key!r}")
        if not isinstance(record[key], kind):
            raise ValueError(f"warm-up record line {line_no}: bad type for {key!r}")
    if record["task"] not in WIRE_TO_TASK:
        raise ValueError(f"warm-up record line {line_no}: unknown task {record['task']!r}")
