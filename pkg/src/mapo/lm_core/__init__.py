"""Causal language-model abstraction shared by every pipeline stage.

A trainable in-process toy transformer for desk-scale runs, a remote HTTP
endpoint client for real LLM inference, deterministic stubs for tests, and
the oracle paraphrase interface — all behind one PolicyHandle surface.
"""

from mapo.lm_core.policy import (
    GenerationParams,
    PolicyHandle,
    SequenceLogProb,
    TokenSequence,
    clone_frozen,
    generate,
    paraphrase,
    prompt_sequence,
    sequence_logprob,
)
from mapo.lm_core.tokenizer import WordTokenizer
from mapo.lm_core.toy import ToyLM, ToyLMConfig, ValueModel

__all__ = [
    "GenerationParams",
    "PolicyHandle",
    "SequenceLogProb",
    "TokenSequence",
    "ToyLM",
    "ToyLMConfig",
    "ValueModel",
    "WordTokenizer",
    "clone_frozen",
    "generate",
    "paraphrase",
    "prompt_sequence",
    "sequence_logprob",
]
