"""The RL update loop: PPO + RRMF joint objective against a frozen reward.

Each update collects fresh rollouts from the actor (the behavior snapshot
refreshes every rollout; the permanent SFT reference anchors the KL
penalty), samples RRMF response groups, then runs ppo_epochs inner passes
minimizing the joint loss with gradient-norm clipping.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import torch

from mapo.lm_core import checkpoint
from mapo.lm_core.policy import (
    GenerationParams,
    PolicyHandle,
    TokenSequence,
    generate,
    prompt_sequence,
)
from mapo.lm_core.toy import completion_logprob_tensor
from mapo.reward_model import RewardModel, score as reward_score
from mapo.rl_trainer import losses as L
from mapo.rl_trainer.rollout import (
    RolloutBatch,
    collect_rollouts,
    conditioning_ids,
    episode_seed,
    recompute_live,
)
from mapo.rl_trainer.rrmf import RrmfBatch, sample_rrmf_batch
from mapo.rl_trainer.weights import LossWeights
from mapo.sft_trainer import TASK_PREFIXES
from mapo.text_metrics import TaskKind

logger = logging.getLogger(__name__)

METRIC_KEYS = (
    "step", "mean_reward", "kl_per_token", "l_pg", "l_v", "l_rexp",
    "l_kl", "l_rank", "l_ft", "l_pre", "l_joint",
)


@dataclass
class RlRunConfig:
    steps: int = 200
    episodes_per_step: int = 8
    rrmf_k: int = 4
    rrmf_prompts_per_step: int = 2
    pretrain_batch_size: int = 4
    learning_rate_actor: float = 2e-5
    learning_rate_critic: float = 1e-5
    adam_epsilon: float = 1e-5
    weight_decay: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only


def train_rl(
    actor: PolicyHandle,
    critic,
    frozen_sft: PolicyHandle,
    reward: RewardModel,
    rl_prompts: Sequence[TokenSequence],
    pretrain_data: Sequence[TokenSequence],
    w: LossWeights,
    run: RlRunConfig,
    params: GenerationParams,
    run_dir: Path | None = None,
) -> tuple[PolicyHandle, list[dict]]:
    """Run the RL stage; returns the trained actor and per-step metrics.

    steps=0 leaves the actor untouched. Aborts on a non-finite joint loss,
    naming the offending component.
    """
    w.validate()
    if run.steps == 0:
        return actor, []
    if not rl_prompts:
        raise ValueError("rl_prompts must be non-empty")
    actor_opt = torch.optim.AdamW(
        actor.toy_model.parameters(),
        lr=run.learning_rate_actor,
        eps=run.adam_epsilon,
        weight_decay=run.weight_decay,
    )
    critic_opt = torch.optim.AdamW(
        critic.parameters(),
        lr=run.learning_rate_critic,
        eps=run.adam_epsilon,
        weight_decay=run.weight_decay,
    )
    metrics: list[dict] = []
    pretrain_cursor = 0
    for step in range(run.steps):
        prompts = [
            rl_prompts[(step * run.episodes_per_step + i) % len(rl_prompts)]
            for i in range(run.episodes_per_step)
        ]
        step_params = replace(params, seed=episode_seed(run.seed, step, 0))
        batch = collect_rollouts(actor, frozen_sft, critic, reward, prompts, step_params)
        if not batch.episodes:
            logger.warning("step %d: every episode dropped", step)
            metrics.append(_empty_metrics(step))
            continue
        L.compute_advantages(batch, w)
        rrmf_batches = _collect_rrmf(actor, reward, prompts, run, step, params)
        pretrain_batch, pretrain_cursor = _next_pretrain(
            pretrain_data, pretrain_cursor, run.pretrain_batch_size, actor
        )
        record = _update(
            actor, critic, frozen_sft, actor_opt, critic_opt,
            batch, rrmf_batches, pretrain_batch, w, step,
        )
        metrics.append(record)
        if run_dir is not None and run.checkpoint_every and (step + 1) % run.checkpoint_every == 0:
            _save(run_dir, actor, step + 1, record, run.seed)
    if run_dir is not None:
        _save(run_dir, actor, run.steps, metrics[-1] if metrics else _empty_metrics(run.steps), run.seed)
    return actor, metrics


def _update(
    actor, critic, frozen_sft, actor_opt, critic_opt,
    batch: RolloutBatch, rrmf_batches: list[RrmfBatch],
    pretrain_batch: list[TokenSequence], w: LossWeights, step: int,
) -> dict:
    mean_reward = sum(ep.terminal_reward for ep in batch.episodes) / len(batch.episodes)
    kl_per_token = _sampled_kl(batch)
    record = None
    for _ in range(w.ppo_epochs):
        for chunk in _minibatches(batch, w.mini_batch_size):
            live = recompute_live(chunk, actor, critic, frozen_sft)
            l_pg = L.policy_loss(live, w)
            l_v = L.value_loss(live, w)
            l_rexp = L.reward_expectation_loss(live)
            l_rho = L.combined_policy_loss(w, l_pg, l_v, l_rexp)
            l_kl = L.kl_sft_loss(live, w)
            l_rank, l_ft = _rrmf_losses(actor, rrmf_batches, w)
            l_sft = L.sft_approx_loss(w, l_kl, l_ft, l_rank)
            if pretrain_batch:
                l_pre = L.pretrain_loss(actor, pretrain_batch, w)
            else:
                l_pre = torch.zeros((), dtype=torch.float64)
            total = L.joint_loss(w, l_rho, l_sft, l_pre)
            components = {
                "l_pg": l_pg, "l_v": l_v, "l_rexp": l_rexp, "l_kl": l_kl,
                "l_rank": l_rank, "l_ft": l_ft, "l_pre": l_pre, "l_joint": total,
            }
            for name, value in components.items():
                if not math.isfinite(float(value.detach())):
                    raise ValueError(f"non-finite loss component {name} at step {step}")
            actor_opt.zero_grad()
            critic_opt.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(actor.toy_model.parameters(), w.max_grad_norm)
            torch.nn.utils.clip_grad_norm_(critic.parameters(), w.max_grad_norm)
            actor_opt.step()
            critic_opt.step()
            record = {
                "step": step,
                "mean_reward": mean_reward,
                "kl_per_token": kl_per_token,
                **{k: float(v.detach()) for k, v in components.items()},
            }
    return record if record is not None else _empty_metrics(step)


def _rrmf_losses(actor, rrmf_batches: list[RrmfBatch], w: LossWeights):
    zero = torch.zeros((), dtype=torch.float64)
    if not rrmf_batches:
        return zero, zero
    ranks = []
    ces = []
    for b in rrmf_batches:
        if len(b.responses) >= 2:  # a lone response has no rankable pair
            ranks.append(L.rrmf_rank_loss(_live_rrmf(actor, b), w))
        ces.append(L.rrmf_best_ce_loss(actor, b))
    rank = torch.stack(ranks).mean() if ranks else zero
    return rank, torch.stack(ces).mean()


def _live_rrmf(actor: PolicyHandle, batch: RrmfBatch) -> RrmfBatch:
    """Recompute normalized log-probs as live tensors for gradients."""
    cond = conditioning_ids(actor.tokenizer, batch.x)
    responses = []
    for r in batch.responses:
        lp = completion_logprob_tensor(actor.toy_model, cond, list(r.y.token_ids))
        responses.append(replace(r, normalized_logprob=lp.mean()))
    return RrmfBatch(x=batch.x, responses=responses, best_index=batch.best_index)


def _collect_rrmf(actor, reward, prompts, run: RlRunConfig, step: int, params) -> list[RrmfBatch]:
    batches = []
    seen = set()
    for x in prompts:
        if x.text in seen:
            continue
        seen.add(x.text)
        rrmf_params = replace(params, seed=episode_seed(run.seed, step, 500 + len(batches)))
        b = sample_rrmf_batch(actor, reward, x, run.rrmf_k, rrmf_params)
        if b is not None:
            batches.append(b)
        if len(batches) >= run.rrmf_prompts_per_step:
            break
    return batches


def _next_pretrain(
    data: Sequence[TokenSequence], cursor: int, size: int, actor: PolicyHandle
) -> tuple[list[TokenSequence], int]:
    if not data or size <= 0:
        return [], cursor
    limit = actor.toy_model.config.context_size - 2
    batch = []
    taken = 0
    while taken < size and taken < len(data):
        seq = data[(cursor + taken) % len(data)]
        taken += 1
        if 0 < len(seq) <= limit:
            batch.append(seq)
    return batch, (cursor + taken) % max(len(data), 1)


def _minibatches(batch: RolloutBatch, size: int):
    for start in range(0, len(batch.episodes), size):
        yield RolloutBatch(episodes=batch.episodes[start : start + size], dropped=0)


def _sampled_kl(batch: RolloutBatch) -> float:
    """Mean per-token KL to the SFT reference over the collected rollout."""
    terms = [
        float(tr.state_kl)
        if tr.state_kl is not None
        else float(tr.actor_logprob) - float(tr.frozen_logprob)
        for ep in batch.episodes
        for tr in ep.transitions
    ]
    return sum(terms) / len(terms)


def _empty_metrics(step: int) -> dict:
    record = {k: 0.0 for k in METRIC_KEYS}
    record["step"] = step
    return record


def _save(run_dir: Path, actor: PolicyHandle, step: int, record: dict, seed: int) -> None:
    checkpoint.save_checkpoint(
        Path(run_dir) / f"step_{step}",
        actor.toy_model,
        {"step": step, "loss": record.get("l_joint", 0.0), "seed": seed,
         "config_hash": ""},
    )


def write_metrics(path: Path, metrics: list[dict]) -> None:
    """One JSON object per update step, append-only schema."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in metrics:
            ordered = {k: record[k] for k in METRIC_KEYS}
            fh.write(json.dumps(ordered, sort_keys=False, ensure_ascii=False) + "\n")


def optimize_prompt(
    actor: PolicyHandle, task: TaskKind, original: str, params: GenerationParams
) -> str:
    """Pure inference: task prefix + original in, one rewritten prompt out."""
    input_text = TASK_PREFIXES[task] + original
    prompt = prompt_sequence(actor.tokenizer, input_text)
    return generate(actor, prompt, params).text


def mean_reward_of_policy(
    actor: PolicyHandle,
    reward: RewardModel,
    prompts: Sequence[TokenSequence],
    params: GenerationParams,
) -> float:
    """Mean reward-model score of the actor's generations over prompts."""
    if not prompts:
        raise ValueError("prompts must be non-empty")
    total = 0.0
    for i, x in enumerate(prompts):
        y = generate(actor, x, replace(params, seed=params.seed + i))
        total += reward_score(reward, x.text, y.text)
    return total / len(prompts)
