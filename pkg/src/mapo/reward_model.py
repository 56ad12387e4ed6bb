"""Scalar reward model trained with pairwise ranking loss.

The backbone is a copy of the SFT rewriter with the softmax head replaced
by a zero-initialized linear head reading the final hidden state at the
last token of the concatenated "x <sep> y" sequence. Training minimizes
-(1/C(k,2)) * mean log sigmoid(r(x, y_w) - r(x, y_l)) so higher-quality
prompts receive higher scores. Only score margins matter: adding a
constant to the head bias leaves loss and accuracy unchanged.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
from torch import nn

from mapo.errors import ContextOverflowError
from mapo.lm_core.policy import PolicyHandle
from mapo.lm_core.tokenizer import WordTokenizer
from mapo.lm_core.toy import ToyLM


@dataclass(frozen=True)
class RankingPair:
    x: str
    y_w: str
    y_l: str


@dataclass(frozen=True)
class RankingPairBatch:
    items: tuple[RankingPair, ...]
    k: int

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        for item in self.items:
            if item.y_w == item.y_l:
                raise ValueError("ranking pair has identical winner and loser")


class RewardModel(nn.Module):
    def __init__(self, backbone: ToyLM, tokenizer: WordTokenizer):
        super().__init__()
        self.backbone = backbone
        self.tokenizer = tokenizer
        self.scalar_head = nn.Linear(backbone.config.d_model, 1)
        self.scalar_head.to(next(backbone.parameters()).dtype)
        nn.init.zeros_(self.scalar_head.weight)
        nn.init.zeros_(self.scalar_head.bias)

    @classmethod
    def from_policy(cls, model: PolicyHandle) -> "RewardModel":
        """Copy the SFT model's backbone; the head starts at zero."""
        return cls(copy.deepcopy(model.toy_model), model.tokenizer)

    def input_ids(self, x: str, y: str) -> list[int]:
        tok = self.tokenizer
        ids = [tok.BOS, *tok.encode(x), tok.SEP, *tok.encode(y)]
        if len(ids) > self.backbone.config.context_size:
            raise ContextOverflowError(
                f"reward input length {len(ids)} exceeds context "
                f"{self.backbone.config.context_size}"
            )
        return ids

    def score_tensor(self, x: str, y: str) -> torch.Tensor:
        """Differentiable scalar score r(x, y)."""
        idx = torch.tensor([self.input_ids(x, y)], dtype=torch.long)
        hidden = self.backbone.hidden_states(idx)[0, -1]
        return self.scalar_head(hidden).squeeze(-1)

    def scores_batch(self, pairs: "list[tuple[str, str]]") -> torch.Tensor:
        """Scores for many (x, y) pairs from one padded forward pass.

        Right-padding is safe: attention is causal, so each row's score
        position only sees its own real tokens.
        """
        ids = [self.input_ids(x, y) for x, y in pairs]
        width = max(len(row) for row in ids)
        batch = torch.full((len(ids), width), self.tokenizer.PAD, dtype=torch.long)
        last = torch.tensor([len(row) - 1 for row in ids])
        for i, row in enumerate(ids):
            batch[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        hidden = self.backbone.hidden_states(batch)
        gathered = hidden[torch.arange(len(ids)), last]
        return self.scalar_head(gathered).squeeze(-1)


def score(model: RewardModel, x: str, y: str) -> float:
    with torch.no_grad():
        return float(model.score_tensor(x, y))


def ranking_loss_from_margins(margins: torch.Tensor, k: int) -> torch.Tensor:
    """-(1/C(k,2)) * mean log sigmoid(margin) over winner-loser margins."""
    if k < 2:
        raise ValueError("k must be >= 2")
    comb = math.comb(k, 2)
    return -torch.nn.functional.logsigmoid(margins).mean() / comb


def pairwise_ranking_loss(model: RewardModel, batch: RankingPairBatch) -> torch.Tensor:
    """Pairwise ranking loss over the batch; strictly positive, margin-decreasing."""
    if not batch.items:
        raise ValueError("batch must be non-empty")
    winners = model.scores_batch([(p.x, p.y_w) for p in batch.items])
    losers = model.scores_batch([(p.x, p.y_l) for p in batch.items])
    return ranking_loss_from_margins(winners - losers, batch.k)


def pairwise_accuracy(model: RewardModel, batch: RankingPairBatch) -> float:
    """Fraction of pairs where the winner scores strictly higher."""
    if not batch.items:
        raise ValueError("batch must be non-empty")
    with torch.no_grad():
        winners = model.scores_batch([(p.x, p.y_w) for p in batch.items])
        losers = model.scores_batch([(p.x, p.y_l) for p in batch.items])
    return float((winners > losers).sum()) / len(batch.items)


def train_reward(
    model: RewardModel,
    batches: list[RankingPairBatch],
    epochs: int = 20,
    learning_rate: float = 1e-3,
    weight_decay: float = 0.1,
    adam_epsilon: float = 1e-5,
    seed: int = 0,
    holdout: RankingPairBatch | None = None,
) -> tuple[RewardModel, list[float]]:
    """Gradient descent on the pairwise ranking loss.

    Returns the trained model and the per-epoch pairwise accuracy log
    (held-out when a holdout batch is given, else training accuracy).
    Aborts on non-finite loss.
    """
    if not batches or not any(b.items for b in batches):
        raise ValueError("training pairs must be non-empty")
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=learning_rate, eps=adam_epsilon, weight_decay=weight_decay
    )
    rng = torch.Generator().manual_seed(seed)
    accuracy_log: list[float] = []
    for epoch in range(epochs):
        order = torch.randperm(len(batches), generator=rng).tolist()
        for i in order:
            loss = pairwise_ranking_loss(model, batches[i])
            if not torch.isfinite(loss):
                raise ValueError(f"non-finite ranking loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        probe = holdout if holdout is not None else _flatten(batches)
        accuracy_log.append(pairwise_accuracy(model, probe))
    return model, accuracy_log


def calibrate_scores(model: RewardModel, batch: RankingPairBatch) -> tuple[float, float]:
    """Affine score anchor: mean loser score 0, mean winner score 1.

    Positive rescaling and bias shifts preserve the score ordering (and so
    pairwise accuracy); this just pins the arbitrary scale/offset a purely
    pairwise loss leaves free, keeping downstream reward magnitudes
    commensurate with the log-prob-scale RL losses. Returns (scale, shift).
    """
    with torch.no_grad():
        winners = model.scores_batch([(p.x, p.y_w) for p in batch.items])
        losers = model.scores_batch([(p.x, p.y_l) for p in batch.items])
        margin = float(winners.mean() - losers.mean())
        scale = 1.0 / margin if margin > 1e-9 else 1.0
        model.scalar_head.weight *= scale
        model.scalar_head.bias *= scale
        shift = -float(losers.mean()) * scale
        model.scalar_head.bias += shift
    return scale, shift


def _flatten(batches: list[RankingPairBatch]) -> RankingPairBatch:
    items = tuple(item for b in batches for item in b.items)
    return RankingPairBatch(items=items, k=batches[0].k)


def write_ranking_pairs(path, batches: list[RankingPairBatch]) -> int:
    """One JSON object per ranking pair: {"x", "y_w", "y_l", "k"}."""
    import json
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for batch in batches:
            for item in batch.items:
                record = {"x": item.x, "y_w": item.y_w, "y_l": item.y_l, "k": batch.k}
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
                count += 1
    return count


def load_ranking_pairs(path) -> list[RankingPairBatch]:
    """Rebuild batches from a ranking-pair JSONL file, grouped by (x, k)."""
    import json
    from pathlib import Path

    groups: dict[tuple[str, int], list[RankingPair]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        key = (record["x"], int(record["k"]))
        groups.setdefault(key, []).append(
            RankingPair(x=record["x"], y_w=record["y_w"], y_l=record["y_l"])
        )
    return [
        RankingPairBatch(items=tuple(items), k=k) for (_, k), items in groups.items()
    ]
