"""Loss terms of the joint RL objective.

Per-token fields of a rollout batch may be floats (recorded) or scalar
tensors (live); every loss works on either, returning a tensor whenever a
tensor is involved so gradients flow. The composite losses are exactly
linear in their weight vectors.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import torch

from mapo.errors import EmptyCompletionError
from mapo.lm_core.policy import PolicyHandle, SequenceLogProb, TokenSequence, sequence_logprob
from mapo.lm_core.toy import completion_logprob_tensor
from mapo.rl_trainer.rollout import RolloutBatch, conditioning_ids
from mapo.rl_trainer.rrmf import RrmfBatch
from mapo.rl_trainer.weights import LossWeights


def _stack(values: Iterable) -> torch.Tensor:
    out = []
    for v in values:
        out.append(v if isinstance(v, torch.Tensor) else torch.tensor(float(v), dtype=torch.float64))
    return torch.stack(out)


def compute_advantages(batch: RolloutBatch, w: LossWeights) -> RolloutBatch:
    """Fill advantages (GAE) and value targets (r + V_next) in place.

    With gae_lambda=0 the advantage is exactly the one-step form
    r + discount_gamma * V_next - V_cur; with gae_lambda=1 it telescopes
    to the discounted return minus V_cur. V_next after the final
    transition is 0.
    """
    for ep in batch.episodes:
        gae = 0.0
        n = len(ep.transitions)
        for t in reversed(range(n)):
            tr = ep.transitions[t]
            v_cur = float(tr.value_estimate)
            v_next = float(ep.transitions[t + 1].value_estimate) if t + 1 < n else 0.0
            delta = tr.reward + w.discount_gamma * v_next - v_cur
            gae = delta + w.discount_gamma * w.gae_lambda * gae
            tr.advantage = gae
            tr.value_target = tr.reward + v_next
    return batch


def policy_loss(batch: RolloutBatch, w: LossWeights, use_clipping: bool = True) -> torch.Tensor:
    """Clipped surrogate policy loss with entropy regularization.

    ratio = exp(actor_logprob - behavior_logprob), behavior falling back
    to the frozen reference when no separate snapshot was recorded. The
    unclipped ratio*advantage form is available for ablation.
    """
    transitions = [tr for ep in batch.episodes for tr in ep.transitions]
    if not transitions:
        raise ValueError("batch has no transitions")
    actor_lp = _stack(tr.actor_logprob for tr in transitions)
    behavior_lp = _stack(
        tr.frozen_logprob if tr.behavior_logprob is None else tr.behavior_logprob
        for tr in transitions
    )
    adv = _stack(tr.advantage for tr in transitions)
    entropy = _stack(tr.entropy for tr in transitions)
    ratio = torch.exp(actor_lp - behavior_lp)
    if use_clipping:
        clipped = torch.clamp(ratio, 1.0 - w.clip_epsilon, 1.0 + w.clip_epsilon)
        core = -torch.minimum(ratio * adv, clipped * adv)
    else:
        core = -(ratio * adv)
    return core.mean() - w.entropy_coef * entropy.mean()


def value_loss(batch: RolloutBatch, w: LossWeights) -> torch.Tensor:
    """value_coef * MSE between predicted values and r + V_next targets."""
    transitions = [tr for ep in batch.episodes for tr in ep.transitions]
    if not transitions:
        raise ValueError("batch has no transitions")
    v_pred = _stack(tr.value_estimate for tr in transitions)
    target = _stack(tr.value_target for tr in transitions)
    return w.value_coef * ((v_pred - target) ** 2).mean()


def reward_expectation_loss(batch: RolloutBatch) -> torch.Tensor:
    """Centered score-function surrogate for maximizing expected reward.

    -mean over episodes of (terminal_reward - batch mean) * sum of actor
    log-probs. The reward score itself carries no gradient path; the
    estimator raises the likelihood of above-average-reward responses.
    """
    if not batch.episodes:
        raise ValueError("batch has no episodes")
    rewards = torch.tensor([ep.terminal_reward for ep in batch.episodes], dtype=torch.float64)
    centered = rewards - rewards.mean()
    sums = _stack(
        _stack(tr.actor_logprob for tr in ep.transitions).sum() for ep in batch.episodes
    )
    return -(centered * sums).mean()


def combined_policy_loss(w: LossWeights, l_pg, l_v, l_r):
    """alpha1 * L_pg + alpha2 * L_v + alpha3 * L_reward_expectation."""
    return w.alpha1 * l_pg + w.alpha2 * l_v + w.alpha3 * l_r


def kl_sft_loss(batch: RolloutBatch, w: LossWeights) -> torch.Tensor:
    """beta_kl times the mean per-token KL estimate to the SFT reference.

    Transitions carrying a per-state KL (full-vocabulary, computed at the
    visited states) use it directly: that estimator has the same
    expectation as the sampled log-ratio but a well-defined pathwise
    gradient, so minimizing it actually pulls the policy back toward the
    reference. Hand-built transitions without state KLs fall back to the
    sampled difference actor_logprob - frozen_logprob.
    """
    transitions = [tr for ep in batch.episodes for tr in ep.transitions]
    if not transitions:
        raise ValueError("batch has no transitions")
    terms = _stack(
        tr.state_kl
        if tr.state_kl is not None
        else _as_scalar(tr.actor_logprob) - _as_scalar(tr.frozen_logprob)
        for tr in transitions
    )
    return w.beta_kl * terms.mean()


def _as_scalar(value):
    return value if isinstance(value, torch.Tensor) else torch.tensor(float(value), dtype=torch.float64)


def rrmf_normalized_logprob(model: PolicyHandle, x: TokenSequence, y: TokenSequence) -> float:
    """Length-normalized conditional log-probability of response y."""
    if len(y) == 0:
        raise EmptyCompletionError("response must be non-empty")
    lp: SequenceLogProb = sequence_logprob(model, x, y)
    return lp.total / len(y)


def rrmf_rank_loss(batch: RrmfBatch, w: LossWeights) -> torch.Tensor:
    """Hinge rank loss aligning normalized log-probs with reward order.

    Sum over ordered pairs with r_i < r_j of
    max(0, lambda_pos * p_i - lambda_neg * p_j); equal-reward pairs are
    excluded. At the default unit scales this is zero exactly when the
    p-ordering is consistent with the strict reward ordering.
    """
    if len(batch.responses) < 2:
        raise ValueError("rank loss needs at least two responses")
    p = _stack(r.normalized_logprob for r in batch.responses)
    total = torch.zeros((), dtype=p.dtype)
    for i, ri in enumerate(batch.responses):
        for j, rj in enumerate(batch.responses):
            if ri.reward_score < rj.reward_score:
                total = total + torch.clamp(w.lambda_pos * p[i] - w.lambda_neg * p[j], min=0.0)
    return total


def rrmf_best_ce_loss(model: PolicyHandle, batch: RrmfBatch) -> torch.Tensor:
    """Negative (unnormalized) log-likelihood of the best-reward response."""
    best = batch.responses[batch.best_index]
    cond = conditioning_ids(model.tokenizer, batch.x)
    logprobs = completion_logprob_tensor(model.toy_model, cond, list(best.y.token_ids))
    return -logprobs.sum()


def sft_approx_loss(w: LossWeights, l_kl, l_ft, l_rank):
    """beta1 * L_kl + beta2 * L_ft + beta3 * L_rank."""
    return w.beta1 * l_kl + w.beta2 * l_ft + w.beta3 * l_rank


def pretrain_loss(
    model: PolicyHandle, pretrain_batch: Sequence[TokenSequence], w: LossWeights
) -> torch.Tensor:
    """pretrain_coef times the mean per-token NLL of general-task sequences.

    Keeps general-task likelihood from collapsing during RL (the
    InstructGPT-style generalization term).
    """
    if not pretrain_batch:
        raise ValueError("pretrain batch must be non-empty")
    tok = model.tokenizer
    total = torch.zeros((), dtype=torch.float64)
    n_tokens = 0
    for seq in pretrain_batch:
        ids = list(seq.token_ids) + [tok.EOS]
        logprobs = completion_logprob_tensor(model.toy_model, [tok.BOS], ids)
        total = total - logprobs.sum()
        n_tokens += len(ids)
    return w.pretrain_coef * total / n_tokens


def joint_loss(w: LossWeights, l_rho, l_sft, l_pre):
    """gamma1 * L_rho + gamma2 * L_sft + gamma3 * L_pre."""
    return w.gamma1 * l_rho + w.gamma2 * l_sft + w.gamma3 * l_pre
