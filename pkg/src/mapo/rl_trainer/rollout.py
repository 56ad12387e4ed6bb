"""Rollout collection for the RL stage.

An episode samples a rewritten prompt y from the actor given the original
prompt x, records per-token log-probabilities under the actor (which is
the behavior policy at collection time) and the permanent frozen SFT
reference, per-state critic values, and the reward-model score attached
to the final transition. Per-token fields may hold plain floats (recorded
values) or scalar tensors (live recomputation during updates).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import torch

from mapo.errors import MapoError
from mapo.lm_core.policy import (
    GenerationParams,
    PolicyHandle,
    TokenSequence,
    generate,
)
from mapo.lm_core.toy import (
    completion_logprob_and_entropy,
    completion_logprob_tensor,
    mix_seed,
    per_state_kl,
)
from mapo.lm_core.tokenizer import WordTokenizer
from mapo.reward_model import RewardModel, score as reward_score

logger = logging.getLogger(__name__)


@dataclass
class Transition:
    token: int
    actor_logprob: "float | torch.Tensor"
    frozen_logprob: float
    value_estimate: "float | torch.Tensor"
    reward: float
    advantage: float = 0.0
    value_target: float = 0.0
    # Behavior-policy snapshot at collection time (denominator of the
    # importance ratio); defaults to frozen_logprob when unset.
    behavior_logprob: float | None = None
    entropy: "float | torch.Tensor" = 0.0
    # Full-vocabulary KL(actor || frozen) at this state; None on hand-built
    # batches, where the sampled log-ratio stands in.
    state_kl: "float | torch.Tensor | None" = None


@dataclass
class Episode:
    prompt: TokenSequence
    response: TokenSequence
    transitions: list[Transition]
    terminal_reward: float


@dataclass
class RolloutBatch:
    episodes: list[Episode]
    dropped: int = 0


def conditioning_ids(tokenizer: WordTokenizer, prompt: TokenSequence) -> list[int]:
    return [tokenizer.BOS, *prompt.token_ids]


def collect_rollouts(
    actor: PolicyHandle,
    frozen_sft: PolicyHandle,
    critic,
    reward: RewardModel,
    prompts: Sequence[TokenSequence],
    params: GenerationParams,
) -> RolloutBatch:
    """Sample one episode per prompt and fill in recorded quantities.

    The reward-model score lands on the final transition; all other
    per-token rewards are zero. Episodes whose generation fails (or comes
    back empty) are dropped and counted.
    """
    if not prompts:
        raise ValueError("prompts must be non-empty")
    episodes: list[Episode] = []
    dropped = 0
    tok = actor.tokenizer
    for i, x in enumerate(prompts):
        ep_params = replace(params, seed=params.seed + i)
        try:
            y = generate(actor, x, ep_params)
        except MapoError as exc:
            logger.warning("episode %d dropped: %s", i, exc)
            dropped += 1
            continue
        if len(y) == 0:
            dropped += 1
            continue
        cond = conditioning_ids(tok, x)
        with torch.no_grad():
            actor_lp = completion_logprob_tensor(actor.toy_model, cond, list(y.token_ids))
            frozen_lp = completion_logprob_tensor(frozen_sft.toy_model, cond, list(y.token_ids))
            state_kl = per_state_kl(actor.toy_model, frozen_sft.toy_model, cond, list(y.token_ids))
            values = critic.values(torch.tensor([cond + list(y.token_ids)], dtype=torch.long))[0]
        terminal = reward_score(reward, x.text, y.text)
        transitions = []
        for t, token in enumerate(y.token_ids):
            transitions.append(
                Transition(
                    token=token,
                    actor_logprob=float(actor_lp[t]),
                    frozen_logprob=float(frozen_lp[t]),
                    # Value of the state *before* emitting token t.
                    value_estimate=float(values[len(cond) - 1 + t]),
                    reward=terminal if t == len(y.token_ids) - 1 else 0.0,
                    behavior_logprob=float(actor_lp[t]),
                    state_kl=float(state_kl[t]),
                )
            )
        episodes.append(Episode(prompt=x, response=y, transitions=transitions, terminal_reward=terminal))
    return RolloutBatch(episodes=episodes, dropped=dropped)


def recompute_live(
    batch: RolloutBatch,
    actor: PolicyHandle,
    critic=None,
    frozen_sft: PolicyHandle | None = None,
    with_entropy: bool = True,
) -> RolloutBatch:
    """Replace actor log-probs (and critic values) with live tensors.

    The recorded behavior/frozen log-probs, rewards, advantages, and value
    targets stay fixed; only the differentiable quantities are refreshed so
    loss gradients flow into the current parameters. When frozen_sft is
    given, per-state KL terms are recomputed live as well.
    """
    tok = actor.tokenizer
    episodes = []
    for ep in batch.episodes:
        cond = conditioning_ids(tok, ep.prompt)
        ids = list(ep.response.token_ids)
        if with_entropy:
            actor_lp, ent = completion_logprob_and_entropy(actor.toy_model, cond, ids)
        else:
            actor_lp = completion_logprob_tensor(actor.toy_model, cond, ids)
            ent = torch.zeros_like(actor_lp)
        kl = (
            per_state_kl(actor.toy_model, frozen_sft.toy_model, cond, ids)
            if frozen_sft is not None
            else None
        )
        if critic is not None:
            values = critic.values(torch.tensor([cond + ids], dtype=torch.long))[0]
        transitions = []
        for t, tr in enumerate(ep.transitions):
            transitions.append(
                replace(
                    tr,
                    actor_logprob=actor_lp[t],
                    entropy=ent[t],
                    value_estimate=values[len(cond) - 1 + t] if critic is not None else tr.value_estimate,
                    state_kl=kl[t] if kl is not None else tr.state_kl,
                )
            )
        episodes.append(replace(ep, transitions=transitions))
    return RolloutBatch(episodes=episodes, dropped=batch.dropped)


def episode_seed(base_seed: int, step: int, index: int) -> int:
    """Decorrelated per-episode sampling seed."""
    return mix_seed(base_seed * 1_000_003 + step * 1031 + index)
