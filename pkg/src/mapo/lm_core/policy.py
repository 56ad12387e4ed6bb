"""PolicyHandle: one surface over toy, remote, and stub language models.

Pipeline stages talk to models only through the functions here, so a real
endpoint, the trainable toy transformer, and deterministic stubs are
interchangeable per stage. Conditioning convention for rewriter models:
the prompt token sequence ends with <sep>, the model input is prefixed
with <bos>, and trained targets end with <eos>.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Sequence

from mapo.errors import EmptyCompletionError, MapoError
from mapo.lm_core import toy as toy_ops
from mapo.lm_core.remote import RemoteClient
from mapo.lm_core.stubs import StubParaphraser, TemplateTarget
from mapo.lm_core.tokenizer import WordTokenizer
from mapo.lm_core.toy import ToyLM

PARAPHRASE_TEMPLATE = (
    "Please rewrite the given text '{original}' while keeping the semantic "
    "meaning unchanged."
)


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.2
    max_tokens: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 1 <= self.max_tokens <= 512:
            raise ValueError("max_tokens must be in [1, 512]")


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple[int, ...]
    text: str

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class SequenceLogProb:
    per_token: tuple[float, ...]
    total: float


@dataclass
class ToyBackend:
    model: ToyLM
    tokenizer: WordTokenizer


@dataclass
class RemoteBackend:
    client: RemoteClient
    tokenizer: WordTokenizer


@dataclass
class ParaphraserBackend:
    stub: StubParaphraser
    tokenizer: WordTokenizer


@dataclass
class TemplateTargetBackend:
    stub: TemplateTarget
    tokenizer: WordTokenizer


Backend = ToyBackend | RemoteBackend | ParaphraserBackend | TemplateTargetBackend


@dataclass
class PolicyHandle:
    """A model plus the role it plays: actor, frozen_sft, oracle, or target_llm."""

    role: str
    backend: Backend

    @property
    def tokenizer(self) -> WordTokenizer:
        return self.backend.tokenizer

    @property
    def toy_model(self) -> ToyLM:
        if not isinstance(self.backend, ToyBackend):
            raise MapoError(f"{self.role} backend has no in-process parameters")
        return self.backend.model


def encode_sequence(tokenizer: WordTokenizer, text: str) -> TokenSequence:
    return TokenSequence(token_ids=tuple(tokenizer.encode(text)), text=text)


def prompt_sequence(tokenizer: WordTokenizer, text: str) -> TokenSequence:
    """Conditioning sequence for rewriter models: text tokens plus <sep>."""
    ids = tuple(tokenizer.encode(text)) + (tokenizer.SEP,)
    return TokenSequence(token_ids=ids, text=text)


def generate(model: PolicyHandle, prompt: TokenSequence, params: GenerationParams) -> TokenSequence:
    """Autoregressive sample from the model; deterministic at temperature 0."""
    backend = model.backend
    if isinstance(backend, ToyBackend):
        ids = sample_ids(backend, prompt.token_ids, params)
        return TokenSequence(token_ids=tuple(ids), text=backend.tokenizer.decode(ids))
    if isinstance(backend, RemoteBackend):
        text = backend.client.generate_text(
            prompt.text, params.temperature, params.max_tokens, params.seed
        )
        return encode_sequence(backend.tokenizer, text)
    if isinstance(backend, TemplateTargetBackend):
        text = backend.stub.generate_text(prompt.text, params.max_tokens)
        return encode_sequence(backend.tokenizer, text)
    if isinstance(backend, ParaphraserBackend):
        text = backend.stub.rewrite(prompt.text, params.seed)
        return encode_sequence(backend.tokenizer, text)
    raise MapoError(f"unsupported backend {type(backend).__name__}")


def sample_ids(backend: ToyBackend, prompt_ids: Sequence[int], params: GenerationParams) -> list[int]:
    return toy_ops.sample_tokens(
        backend.model,
        [backend.tokenizer.BOS, *prompt_ids],
        params.max_tokens,
        params.temperature,
        params.seed,
        eos_id=backend.tokenizer.EOS,
    )


def sequence_logprob(
    model: PolicyHandle, prompt: TokenSequence, completion: TokenSequence
) -> SequenceLogProb:
    """Per-token log-probabilities of the completion under the model."""
    if len(completion) == 0:
        raise EmptyCompletionError("completion must be non-empty")
    backend = model.backend
    if not isinstance(backend, ToyBackend):
        raise MapoError(f"{model.role} backend does not expose log-probabilities")
    per_token = toy_ops.completion_logprob_tensor(
        backend.model,
        [backend.tokenizer.BOS, *prompt.token_ids],
        list(completion.token_ids),
    ).detach()
    values = tuple(float(v) for v in per_token)
    return SequenceLogProb(per_token=values, total=float(per_token.sum()))


def paraphrase(
    oracle: PolicyHandle,
    original: str,
    n: int,
    params: GenerationParams | None = None,
) -> list[str]:
    """n paraphrases of original from the oracle model (or its stub)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    backend = oracle.backend
    if isinstance(backend, ParaphraserBackend):
        return backend.stub.rewrites(original, n)
    params = params or GenerationParams()
    wrapped = PARAPHRASE_TEMPLATE.format(original=original)
    prompt = prompt_sequence(oracle.tokenizer, wrapped)
    outputs = []
    for i in range(n):
        out = generate(oracle, prompt, replace(params, seed=params.seed + i))
        outputs.append(out.text)
    return outputs


def clone_frozen(model: PolicyHandle) -> PolicyHandle:
    """Deep copy of a trainable model with parameters frozen, role frozen_sft."""
    backend = model.backend
    if not isinstance(backend, ToyBackend):
        raise MapoError("only in-process trainable models can be cloned")
    clone = copy.deepcopy(backend.model)
    clone.requires_grad_(False)
    clone.eval()
    return PolicyHandle(role="frozen_sft", backend=ToyBackend(clone, backend.tokenizer))
