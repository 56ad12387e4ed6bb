"""Supervised fine-tuning of the prompt rewriter on warm-up pairs.

Each example is the task-disambiguation prefix plus the original prompt;
the target is the optimized prompt. Loss is the mean per-token negative
log-likelihood over target tokens only (the input prefix is masked), with
an end marker appended so sampling learns to terminate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import torch

from mapo.errors import ContextOverflowError
from mapo.lm_core import checkpoint
from mapo.lm_core.policy import PolicyHandle
from mapo.lm_core.toy import completion_logprob_tensor
from mapo.text_metrics import TaskKind
from mapo.warmup_builder import PromptPair

logger = logging.getLogger(__name__)

TASK_PREFIXES = {
    TaskKind.GENERATION: "This is a generative task. ",
    TaskKind.QUESTION_ANSWERING: "This is a question-answering task. ",
    TaskKind.CLASSIFICATION: "This is a classification task. ",
}


@dataclass(frozen=True)
class SftExample:
    input_text: str
    target_text: str
    task: TaskKind


@dataclass
class SftConfig:
    epochs: int = 20
    learning_rate: float = 2e-5
    batch_size: int = 8
    gradient_accumulation_steps: int = 8
    weight_decay: float = 0.1
    adam_epsilon: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        # learning_rate 0 is legal: it must leave parameters bit-identical.
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be >= 0")
        for name in ("batch_size", "gradient_accumulation_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def format_sft_example(pair: PromptPair) -> SftExample:
    """Prefix the original prompt with its task instruction."""
    if not pair.original or not pair.optimized:
        raise ValueError("prompt pair fields must be non-empty")
    return SftExample(
        input_text=TASK_PREFIXES[pair.task] + pair.original,
        target_text=pair.optimized,
        task=pair.task,
    )


def example_token_ids(model: PolicyHandle, example: SftExample) -> tuple[list[int], list[int]]:
    """(conditioning ids, target ids) for one example.

    Conditioning is <bos> + input tokens + <sep>; the target is the
    optimized prompt's tokens plus <eos>.
    """
    tok = model.tokenizer
    prompt_ids = [tok.BOS, *tok.encode(example.input_text), tok.SEP]
    target_ids = [*tok.encode(example.target_text), tok.EOS]
    return prompt_ids, target_ids


def sft_loss(model: PolicyHandle, batch: list[SftExample]) -> torch.Tensor:
    """Mean per-token NLL of targets given inputs; differentiable.

    Each example contributes its own token-mean NLL and the batch loss is
    the mean over examples, so equal-size batches compose exactly.
    Examples whose combined length overflows the context are skipped with
    a warning; an all-overflow batch raises.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    lm = model.toy_model
    per_example = []
    skipped = 0
    for example in batch:
        prompt_ids, target_ids = example_token_ids(model, example)
        if len(prompt_ids) + len(target_ids) > lm.config.context_size:
            skipped += 1
            continue
        logprobs = completion_logprob_tensor(lm, prompt_ids, target_ids)
        per_example.append(-logprobs.mean())
    if skipped:
        logger.warning("sft batch: skipped %d over-length examples", skipped)
    if not per_example:
        raise ContextOverflowError("every example in the batch overflows the context")
    return torch.stack(per_example).mean()


def sft_step(model: PolicyHandle, batch: list[SftExample]) -> float:
    """Compute the batch loss and accumulate gradients; returns the loss."""
    loss = sft_loss(model, batch)
    loss.backward()
    return float(loss.detach())


def train_sft(
    model: PolicyHandle,
    dataset: list[SftExample],
    config: SftConfig,
    run_dir: Path | None = None,
) -> tuple[PolicyHandle, list[float]]:
    """AdamW training with gradient accumulation; checkpoints every epoch.

    Returns the model handle (trained in place) and the per-epoch mean
    loss log. epochs=0 leaves parameters untouched.
    """
    config.validate()
    if not dataset:
        raise ValueError("dataset must be non-empty")
    lm = model.toy_model
    optimizer = torch.optim.AdamW(
        lm.parameters(),
        lr=config.learning_rate,
        eps=config.adam_epsilon,
        weight_decay=config.weight_decay,
    )
    rng = torch.Generator().manual_seed(config.seed)
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = torch.randperm(len(dataset), generator=rng).tolist()
        epoch_losses = []
        optimizer.zero_grad()
        pending = 0
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            loss = sft_loss(model, batch)
            if not torch.isfinite(loss):
                raise ValueError(f"non-finite SFT loss at epoch {epoch}")
            (loss / config.gradient_accumulation_steps).backward()
            epoch_losses.append(float(loss.detach()))
            pending += 1
            if pending == config.gradient_accumulation_steps:
                optimizer.step()
                optimizer.zero_grad()
                pending = 0
        if pending:
            optimizer.step()
            optimizer.zero_grad()
        mean_loss = sum(epoch_losses) / len(epoch_losses)
        losses.append(mean_loss)
        if run_dir is not None:
            checkpoint.save_checkpoint(
                Path(run_dir) / f"epoch_{epoch + 1}",
                lm,
                {
                    "epoch": epoch + 1,
                    "loss": mean_loss,
                    "seed": config.seed,
                    "config_hash": _config_hash(config),
                },
            )
    return model, losses


def _config_hash(config: SftConfig) -> str:
    import hashlib

    fields = f"{config.epochs}|{config.learning_rate}|{config.batch_size}|" \
             f"{config.gradient_accumulation_steps}|{config.weight_decay}|" \
             f"{config.adam_epsilon}|{config.seed}"
    return hashlib.sha256(fields.encode()).hexdigest()[:16]
