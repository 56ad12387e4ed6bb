"""Reinforcement-learning stage: PPO + RRMF joint objective.

Rollout collection against the frozen reward model, the individual loss
terms (clipped policy surrogate, value regression, reward expectation,
KL-to-reference, RRMF rank and best-response cross-entropy, pretrain
likelihood), their weighted combinations, and the update loop.
"""

from mapo.rl_trainer.losses import (
    combined_policy_loss,
    compute_advantages,
    joint_loss,
    kl_sft_loss,
    policy_loss,
    pretrain_loss,
    reward_expectation_loss,
    rrmf_best_ce_loss,
    rrmf_normalized_logprob,
    rrmf_rank_loss,
    sft_approx_loss,
    value_loss,
)
from mapo.rl_trainer.rollout import Episode, RolloutBatch, Transition, collect_rollouts
from mapo.rl_trainer.train import optimize_prompt, train_rl
from mapo.rl_trainer.weights import LossWeights

__all__ = [
    "Episode",
    "LossWeights",
    "RolloutBatch",
    "Transition",
    "collect_rollouts",
    "combined_policy_loss",
    "compute_advantages",
    "joint_loss",
    "kl_sft_loss",
    "optimize_prompt",
    "policy_loss",
    "pretrain_loss",
    "reward_expectation_loss",
    "rrmf_best_ce_loss",
    "rrmf_normalized_logprob",
    "rrmf_rank_loss",
    "sft_approx_loss",
    "train_rl",
    "value_loss",
]
