import random

import pytest
import torch

from mapo.lm_core.policy import PolicyHandle, ToyBackend
from mapo.lm_core.tokenizer import WordTokenizer
from mapo.lm_core.toy import ToyLM, ToyLMConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_tokenizer() -> WordTokenizer:
    return WordTokenizer([f"w{i}" for i in range(12)])


@pytest.fixture()
def tiny_handle(tiny_tokenizer) -> PolicyHandle:
    model = ToyLM(
        ToyLMConfig(vocab_size=tiny_tokenizer.vocab_size, context_size=32, d_model=16),
        seed=11,
    )
    return PolicyHandle(role="actor", backend=ToyBackend(model, tiny_tokenizer))


class OneHotLM(torch.nn.Module):
    """Degenerate LM: probability ~1 on the next token of a fixed cycle.

    forward returns logits with a huge margin on target_of[token], so the
    log-probability of that continuation is exactly 0.0 in float64.
    """

    def __init__(self, vocab_size: int, target_of=None, context_size: int = 64):
        super().__init__()
        self.config = ToyLMConfig(vocab_size=vocab_size, context_size=context_size)
        self.target_of = target_of or (lambda t: t)
        self._param = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        b, t = idx.shape
        logits = torch.zeros(b, t, self.config.vocab_size, dtype=torch.float64)
        for i in range(b):
            for j in range(t):
                logits[i, j, self.target_of(int(idx[i, j]))] = 1e9
        return logits + 0.0 * self._param


class PresetLM(torch.nn.Module):
    """LM whose next-token log-probabilities are given per position."""

    def __init__(self, logprob_rows: list[list[float]], context_size: int = 64):
        super().__init__()
        rows = torch.tensor(logprob_rows, dtype=torch.float64)
        self.config = ToyLMConfig(vocab_size=rows.shape[1], context_size=context_size)
        self.rows = rows
        self._param = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        b, t = idx.shape
        logits = self.rows[:t].unsqueeze(0).expand(b, t, -1).clone()
        return logits + 0.0 * self._param


def uniform_model(vocab_size: int, context_size: int = 64) -> ToyLM:
    """ToyLM emitting the uniform distribution at every position."""
    model = ToyLM(ToyLMConfig(vocab_size=vocab_size, context_size=context_size), seed=0)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    return model


def finite_difference_check(loss_fn, module, n_coords=20, eps=1e-6, rtol=1e-4, seed=0):
    """Compare autograd gradients of loss_fn() against central differences.

    loss_fn must rebuild the computation from the module's current
    parameters on every call. Coordinates are sampled without replacement
    across all parameters. Returns the worst relative error.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = random.Random(seed)
    coords = rng.sample(range(total), min(n_coords, total))
    worst = 0.0
    for flat in coords:
        pi, offset = 0, flat
        while offset >= sizes[pi]:
            offset -= sizes[pi]
            pi += 1
        p = params[pi]
        with torch.no_grad():
            orig = p.view(-1)[offset].item()
            p.view(-1)[offset] = orig + eps
            up = float(loss_fn().detach())
            p.view(-1)[offset] = orig - eps
            dn = float(loss_fn().detach())
            p.view(-1)[offset] = orig
        fd = (up - dn) / (2 * eps)
        analytic = float(grads[pi].view(-1)[offset])
        rel = abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-8)
        worst = max(worst, rel)
        assert rel <= rtol, (
            f"gradient mismatch at coord {flat}: analytic={analytic:.10g} fd={fd:.10g} rel={rel:.3g}"
        )
    return worst
