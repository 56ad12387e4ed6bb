"""Small decoder-only transformer, trainable on CPU in minutes.

Two pre-norm blocks, learned positional embeddings, explicit causal
attention. Parameters are float64 by default so analytic gradients can be
checked against central finite differences tightly. All sampling goes
through explicitly seeded generators; nothing touches torch's global RNG
after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from mapo.errors import ContextOverflowError


def mix_seed(seed: int) -> int:
    """SplitMix64 finalizer; decorrelates nearby seeds before use."""
    z = (seed + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (z ^ (z >> 31)) & 0x7FFFFFFFFFFFFFFF


@dataclass
class ToyLMConfig:
    vocab_size: int
    context_size: int = 64
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2

    def validate(self) -> None:
        if self.vocab_size < 1 or self.vocab_size > 256:
            raise ValueError("vocab_size must be in [1, 256]")
        if self.context_size < 1 or self.context_size > 64:
            raise ValueError("context_size must be in [1, 64]")
        if self.d_model > 64 or self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be <= 64 and divisible by n_heads")


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        q, k, v = self.qkv(x).split(c, dim=2)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).contiguous().view(b, t, c)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class ToyLM(nn.Module):
    def __init__(self, config: ToyLMConfig, seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        config.validate()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.context_size, config.d_model)
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads) for _ in range(config.n_layers)
        )
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size)
        self.to(dtype)
        reinit_parameters(self, seed)

    def hidden_states(self, idx: torch.Tensor) -> torch.Tensor:
        """Final-layer-norm hidden states, shape [batch, t, d_model]."""
        _, t = idx.shape
        if t > self.config.context_size:
            raise ContextOverflowError(
                f"sequence length {t} exceeds context {self.config.context_size}"
            )
        pos = torch.arange(t, device=idx.device)
        x = self.tok_emb(idx) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        """Next-token logits, shape [batch, t, vocab]."""
        return self.head(self.hidden_states(idx))


class ValueModel(nn.Module):
    """Critic: same backbone architecture with a scalar value head."""

    def __init__(self, config: ToyLMConfig, seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.backbone = ToyLM(config, seed=seed, dtype=dtype)
        self.value_head = nn.Linear(config.d_model, 1)
        self.to(dtype)
        # Zero head: the critic starts at V = 0 everywhere.
        nn.init.zeros_(self.value_head.weight)
        nn.init.zeros_(self.value_head.bias)

    def values(self, idx: torch.Tensor) -> torch.Tensor:
        """Per-position value estimates, shape [batch, t]."""
        return self.value_head(self.backbone.hidden_states(idx)).squeeze(-1)

    @classmethod
    def from_backbone(cls, model: "ToyLM") -> "ValueModel":
        """Warm-start the critic's hidden layers from a trained LM."""
        import copy

        critic = cls(model.config, seed=0, dtype=next(model.parameters()).dtype)
        critic.backbone = copy.deepcopy(model)
        return critic


def reinit_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic init: N(0, 0.02) weights, zero biases, unit layer norms."""
    gen = torch.Generator().manual_seed(mix_seed(seed))
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.dim() >= 2 or "emb" in name:
                noise = torch.randn(p.shape, generator=gen, dtype=torch.float64)
                p.copy_((noise * 0.02).to(p.dtype))
            elif "ln" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def next_token_logprobs(model: ToyLM, prefix_ids: list[int]) -> torch.Tensor:
    """Log-probabilities of the next token after prefix_ids, shape [vocab]."""
    idx = torch.tensor([prefix_ids], dtype=torch.long)
    logits = model(idx)[0, -1]
    return torch.log_softmax(logits, dim=-1)


def completion_logprob_tensor(
    model: ToyLM, prompt_ids: list[int], completion_ids: list[int]
) -> torch.Tensor:
    """Per-token log-probabilities of the completion given the prompt.

    Differentiable w.r.t. model parameters; shape [len(completion_ids)].
    The model input is prompt_ids + completion_ids and each completion
    token is scored with the logits at its preceding position.
    """
    if not completion_ids:
        raise ValueError("completion must be non-empty")
    if not prompt_ids:
        raise ValueError("prompt must be non-empty (prepend a BOS token)")
    ids = list(prompt_ids) + list(completion_ids)
    idx = torch.tensor([ids], dtype=torch.long)
    logits = model(idx)[0]
    logprobs = torch.log_softmax(logits, dim=-1)
    start = len(prompt_ids) - 1
    positions = torch.arange(start, start + len(completion_ids))
    targets = torch.tensor(completion_ids, dtype=torch.long)
    return logprobs[positions, targets]


def completion_entropy_tensor(
    model: ToyLM, prompt_ids: list[int], completion_ids: list[int]
) -> torch.Tensor:
    """Per-position entropy of the next-token distribution at completion steps."""
    return completion_logprob_and_entropy(model, prompt_ids, completion_ids)[1]


def completion_logprob_and_entropy(
    model: ToyLM, prompt_ids: list[int], completion_ids: list[int]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token log-probs and per-position entropies from one forward pass."""
    if not completion_ids:
        raise ValueError("completion must be non-empty")
    ids = list(prompt_ids) + list(completion_ids)
    idx = torch.tensor([ids], dtype=torch.long)
    logits = model(idx)[0]
    logprobs = torch.log_softmax(logits, dim=-1)
    start = len(prompt_ids) - 1
    rows = logprobs[start : start + len(completion_ids)]
    targets = torch.tensor(completion_ids, dtype=torch.long)
    token_lp = rows.gather(1, targets.unsqueeze(1)).squeeze(1)
    entropy = -(rows.exp() * rows).sum(dim=-1)
    return token_lp, entropy


def per_state_kl(
    actor: ToyLM, reference: ToyLM, prompt_ids: list[int], completion_ids: list[int]
) -> torch.Tensor:
    """Exact KL(actor || reference) over the full vocabulary at each visited state.

    Differentiable w.r.t. the actor; this is the Rao-Blackwellized form of
    the sampled log-ratio estimate (same expectation, well-defined
    pathwise gradient, zero exactly when the two policies agree).
    """
    if not completion_ids:
        raise ValueError("completion must be non-empty")
    ids = list(prompt_ids) + list(completion_ids)
    idx = torch.tensor([ids], dtype=torch.long)
    start = len(prompt_ids) - 1
    rows = slice(start, start + len(completion_ids))
    lp_a = torch.log_softmax(actor(idx)[0], dim=-1)[rows]
    with torch.no_grad():
        lp_f = torch.log_softmax(reference(idx)[0], dim=-1)[rows]
    return (lp_a.exp() * (lp_a - lp_f)).sum(dim=-1)


def sample_tokens(
    model: ToyLM,
    prompt_ids: list[int],
    max_tokens: int,
    temperature: float,
    seed: int,
    eos_id: int | None,
) -> list[int]:
    """Autoregressive sampling; temperature 0 is greedy argmax.

    Stops at eos_id (not included in the output) or after max_tokens.
    The prompt must leave room for max_tokens within the context window.
    """
    if len(prompt_ids) + max_tokens > model.config.context_size:
        raise ContextOverflowError(
            f"prompt length {len(prompt_ids)} + max_tokens {max_tokens} "
            f"exceeds context {model.config.context_size}"
        )
    gen = torch.Generator().manual_seed(mix_seed(seed))
    ids = list(prompt_ids)
    out: list[int] = []
    with torch.no_grad():
        for _ in range(max_tokens):
            logits = model(torch.tensor([ids], dtype=torch.long))[0, -1]
            if temperature == 0.0:
                token = int(torch.argmax(logits).item())
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                token = int(torch.multinomial(probs, 1, generator=gen).item())
            if eos_id is not None and token == eos_id:
                break
            ids.append(token)
            out.append(token)
    return out
