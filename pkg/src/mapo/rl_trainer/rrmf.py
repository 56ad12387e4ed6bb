"""Ranking Responses from Model Feedback: batch structures and sampling.

For one prompt x, several responses are sampled from the actor; each
carries its reward-model score and the actor's length-normalized
log-probability. best_index points at the maximum reward (ties break to
the lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from mapo.lm_core.policy import GenerationParams, PolicyHandle, TokenSequence, generate
from mapo.reward_model import RewardModel, score as reward_score


@dataclass
class RrmfResponse:
    y: TokenSequence
    reward_score: float
    normalized_logprob: "float | object"


@dataclass
class RrmfBatch:
    x: TokenSequence
    responses: list[RrmfResponse]
    best_index: int


def make_rrmf_batch(x: TokenSequence, responses: Sequence[RrmfResponse]) -> RrmfBatch:
    responses = list(responses)
    if not responses:
        raise ValueError("responses must be non-empty")
    best = max(range(len(responses)), key=lambda i: (responses[i].reward_score, -i))
    return RrmfBatch(x=x, responses=responses, best_index=best)


def sample_rrmf_batch(
    actor: PolicyHandle,
    reward: RewardModel,
    x: TokenSequence,
    k: int,
    params: GenerationParams,
) -> RrmfBatch | None:
    """Sample k distinct-seeded responses and score them; None if all empty."""
    from mapo.rl_trainer.losses import rrmf_normalized_logprob

    responses = []
    for i in range(k):
        y = generate(actor, x, replace(params, seed=params.seed + 7919 * (i + 1)))
        if len(y) == 0:
            continue
        responses.append(
            RrmfResponse(
                y=y,
                reward_score=reward_score(reward, x.text, y.text),
                normalized_logprob=rrmf_normalized_logprob(actor, x, y),
            )
        )
    if not responses:
        return None
    return make_rrmf_batch(x, responses)
