"""Evaluation: score distributions, improvement tables, and prompt analysis.

Reproduces the empirical-study methodology at any scale: per-dataset
metric distribution summaries, baseline-vs-treatment improvement rows
with a guarded relative percentage (a 0.0 baseline is flagged undefined,
matching the "-" convention), mean normalized edit distance between
prompt pairs, and word-frequency breakdowns of original vs optimized
corpora. Raw scores are retained so plots can be reproduced externally.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from mapo.errors import DatasetMismatchError
from mapo.lm_core.policy import GenerationParams, PolicyHandle, generate, prompt_sequence
from mapo.text_metrics import TaskKind, normalized_edit_distance, score_for_task, tokenize
from mapo.warmup_builder import PromptPair

# High-frequency instruction words from the exploratory analysis.
INSTRUCTION_WORD_STOPLIST = frozenset(
    {"sentence", "topics", "subjects", "present", "statement",
     "discussed", "mentioned", "included", "following"}
)


@dataclass(frozen=True)
class MetricReport:
    dataset_name: str
    task: TaskKind
    n: int
    mean: float
    median: float
    quantiles: tuple[float, float, float, float]  # p10, p25, p75, p90
    scores: tuple[float, ...]

    @classmethod
    def from_scores(cls, dataset_name: str, task: TaskKind, scores: Sequence[float]) -> "MetricReport":
        if not scores:
            raise ValueError("scores must be non-empty")
        arr = np.asarray(scores, dtype=float)
        q = np.quantile(arr, [0.10, 0.25, 0.75, 0.90])
        return cls(
            dataset_name=dataset_name,
            task=task,
            n=len(scores),
            mean=float(arr.mean()),
            median=float(np.median(arr)),
            quantiles=tuple(float(v) for v in q),
            scores=tuple(float(s) for s in scores),
        )


@dataclass(frozen=True)
class ImprovementRow:
    dataset_name: str
    baseline: float
    treatment: float
    absolute_delta: float
    relative_pct: float | None  # None when the baseline is zero


def evaluate_prompts(
    target: PolicyHandle,
    records: Sequence[tuple[str, str]],
    task: TaskKind,
    params: GenerationParams,
    dataset_name: str = "",
) -> MetricReport:
    """Generate and score every (prompt, reference) record against the target."""
    if not records:
        raise ValueError("records must be non-empty")
    scores = []
    for i, (prompt, reference) in enumerate(records):
        try:
            out = generate(target, prompt_sequence(target.tokenizer, prompt),
                           replace(params, seed=params.seed + i))
            scores.append(score_for_task(task, out.text, reference))
        except Exception:
            scores.append(0.0)
    return MetricReport.from_scores(dataset_name, task, scores)


def compare_runs(baseline: MetricReport, treatment: MetricReport) -> ImprovementRow:
    """Absolute and relative improvement of treatment over baseline means."""
    if baseline.dataset_name != treatment.dataset_name or baseline.task != treatment.task:
        raise DatasetMismatchError(
            f"cannot compare {baseline.dataset_name}/{baseline.task.value} "
            f"with {treatment.dataset_name}/{treatment.task.value}"
        )
    delta = treatment.mean - baseline.mean
    relative = 100.0 * delta / baseline.mean if baseline.mean > 0 else None
    return ImprovementRow(
        dataset_name=baseline.dataset_name,
        baseline=baseline.mean,
        treatment=treatment.mean,
        absolute_delta=delta,
        relative_pct=relative,
    )


def paired_t_test(baseline_scores: Sequence[float], treatment_scores: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test over per-record score deltas: (statistic, p)."""
    if len(baseline_scores) != len(treatment_scores):
        raise ValueError("paired test needs equal-length score lists")
    result = stats.ttest_rel(treatment_scores, baseline_scores)
    return float(result.statistic), float(result.pvalue)


def mean_normalized_edit_distance(pairs: Sequence[PromptPair]) -> float:
    """Average character-level edit distance between original and optimized."""
    if not pairs:
        raise ValueError("pairs must be non-empty")
    return sum(normalized_edit_distance(p.original, p.optimized) for p in pairs) / len(pairs)


def word_frequency_report(
    originals: Sequence[str],
    optimized: Sequence[str],
    stoplist: Iterable[str] | None = None,
    top_k: int = 3,
) -> dict[str, list[tuple[str, float]]]:
    """Top-k word proportions per corpus, optionally minus a stoplist."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    stop = frozenset(stoplist) if stoplist is not None else frozenset()
    return {
        "original": _top_words(originals, stop, top_k),
        "optimized": _top_words(optimized, stop, top_k),
    }


def _top_words(corpus: Sequence[str], stop: frozenset, top_k: int) -> list[tuple[str, float]]:
    from collections import Counter

    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(w for w in tokenize(text).tokens if w not in stop)
    total = sum(counts.values())
    if total == 0:
        return []
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return [(word, count / total) for word, count in ranked]


REPORT_COLUMNS = ("dataset", "task", "n", "mean", "median", "p10", "p25", "p75", "p90")
RAW_COLUMNS = ("dataset", "record_index", "score")
IMPROVEMENT_COLUMNS = ("dataset", "baseline", "treatment", "absolute_delta", "relative_pct")


def write_report_csv(path: Path, reports: Sequence[MetricReport]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([r.dataset_name, r.task.value, r.n, r.mean, r.median, *r.quantiles])


def write_raw_scores_csv(path: Path, reports: Sequence[MetricReport]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RAW_COLUMNS)
        for r in reports:
            for i, s in enumerate(r.scores):
                writer.writerow([r.dataset_name, i, s])


def write_improvement_csv(path: Path, rows: Sequence[ImprovementRow]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IMPROVEMENT_COLUMNS)
        for row in rows:
            writer.writerow([
                row.dataset_name, row.baseline, row.treatment, row.absolute_delta,
                "-" if row.relative_pct is None else row.relative_pct,
            ])
