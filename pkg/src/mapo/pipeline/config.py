"""Pipeline configuration: one YAML document with per-stage sections.

Published hyperparameter names are accepted verbatim as keys (for example
"Clip Parameter: 0.2" or "Learning Rate for Actor Model: 2e-5"); keys are
normalized case- and punctuation-insensitively onto the canonical
snake_case field names. Unknown keys are rejected. parse -> serialize ->
parse round-trips to an equal config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from mapo.errors import ConfigError
from mapo.rl_trainer.weights import LossWeights
from mapo.sft_trainer import SftConfig
from mapo.synthetic import INSTRUCTION_WORDS, TEMPLATE_WORDS

_ALIASES = {
    "learning_rate_for_actor_model": "learning_rate_actor",
    "learning_rate_for_critic_model": "learning_rate_critic",
    "entropy_coefficient": "entropy_coef",
    "value_loss_coefficient": "value_coef",
    "positive_lambda_coefficient": "lambda_pos",
    "negative_lambda_coefficient": "lambda_neg",
    "gamma": "discount_gamma",
    "adam_optimizer_epsilon": "adam_epsilon",
    "max_gradient_norm": "max_grad_norm",
    "clip_parameter": "clip_epsilon",
    "learning_rate_for_sft": "learning_rate",
}


def _normalize_key(key: str) -> str:
    slug = re.sub(r"[^0-9a-z]+", "_", str(key).strip().lower()).strip("_")
    return _ALIASES.get(slug, slug)


@dataclass
class EndpointConfig:
    backend: str = "stub"  # stub | toy | remote | template_stub
    url: str = ""

    def validate(self, name: str) -> None:
        if self.backend not in ("stub", "toy", "remote", "template_stub"):
            raise ConfigError(f"endpoints.{name}.backend: unknown backend {self.backend!r}")
        if self.backend == "remote" and not self.url:
            raise ConfigError(f"endpoints.{name}.url required for remote backend")


@dataclass
class ModelConfig:
    context_size: int = 64
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    init_seed: int = 7

    def validate(self) -> None:
        if not 1 <= self.context_size <= 64:
            raise ConfigError("model.context_size must be in [1, 64]")
        if self.d_model > 64:
            raise ConfigError("model.d_model must be <= 64")


@dataclass
class StubsConfig:
    template_words: list[str] = field(default_factory=lambda: list(TEMPLATE_WORDS))
    instruction_words: list[str] = field(default_factory=lambda: list(INSTRUCTION_WORDS))
    paraphraser_politeness: list[str] = field(default_factory=lambda: list(TEMPLATE_WORDS))


@dataclass
class WarmupConfig:
    prompts_file: str = "warmup_prompts.jsonl"
    candidates_per_prompt: int = 16
    temperature: float = 0.0
    max_tokens: int = 24

    def validate(self) -> None:
        if self.candidates_per_prompt < 1:
            raise ConfigError("warmup.candidates_per_prompt must be >= 1")
        if not 0.0 <= self.temperature:
            raise ConfigError("warmup.temperature must be >= 0")
        if not 1 <= self.max_tokens <= 512:
            raise ConfigError("warmup.max_tokens must be in [1, 512]")


@dataclass
class SftStageConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 8
    gradient_accumulation_steps: int = 8
    weight_decay: float = 0.1
    adam_epsilon: float = 1e-5

    def to_sft_config(self, seed: int) -> SftConfig:
        cfg = SftConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            gradient_accumulation_steps=self.gradient_accumulation_steps,
            weight_decay=self.weight_decay,
            adam_epsilon=self.adam_epsilon,
            seed=seed,
        )
        cfg.validate()
        return cfg


@dataclass
class RewardStageConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    adam_epsilon: float = 1e-5
    holdout_fraction: float = 0.2
    ranking_band: int = 0  # 0 = keep every entry of each ranking sequence
    calibrate_bias: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("reward.holdout_fraction must be in [0, 1)")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ConfigError("reward.epochs and learning_rate must be positive")


@dataclass
class RlStageConfig:
    prompts_file: str = "rl_prompts.jsonl"
    pretrain_file: str = "pretrain.jsonl"
    pretrain_sample_rate: float = 0.1
    steps: int = 200
    episodes_per_step: int = 8
    rrmf_k: int = 4
    rrmf_prompts_per_step: int = 2
    pretrain_batch_size: int = 4
    temperature: float = 0.2
    max_tokens: int = 16
    checkpoint_every: int = 0
    learning_rate_actor: float = 2e-5
    learning_rate_critic: float = 1e-5
    # Joint-objective coefficients, including the published defaults.
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    beta_kl: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    pretrain_coef: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    discount_gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    ppo_epochs: int = 20
    max_grad_norm: float = 0.5
    mini_batch_size: int = 32
    lambda_pos: float = 1.0
    lambda_neg: float = 1.0
    weight_decay: float = 0.1
    adam_epsilon: float = 1e-5
    gradient_accumulation_steps: int = 8

    def loss_weights(self) -> LossWeights:
        w = LossWeights(
            **{f.name: getattr(self, f.name) for f in fields(LossWeights)}
        )
        w.validate()
        return w

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("rl.steps must be >= 0")
        if self.rrmf_k < 2:
            raise ConfigError("rl.rrmf_k must be >= 2")
        if not 0.0 <= self.pretrain_sample_rate <= 1.0:
            raise ConfigError("rl.pretrain_sample_rate must be in [0, 1]")
        if not 1 <= self.max_tokens <= 512:
            raise ConfigError("rl.max_tokens must be in [1, 512]")
        try:
            self.loss_weights()
        except ValueError as exc:
            raise ConfigError(f"rl: {exc}") from exc


@dataclass
class EvalStageConfig:
    records_file: str = "eval_records.jsonl"
    temperature: float = 0.0
    max_tokens: int = 24

    def validate(self) -> None:
        if not 1 <= self.max_tokens <= 512:
            raise ConfigError("eval.max_tokens must be in [1, 512]")


@dataclass
class PipelineConfig:
    run_dir: str = "runs/demo"
    seeds: dict = field(
        default_factory=lambda: {"warmup": 11, "sft": 22, "reward": 33, "rl": 44, "eval": 55}
    )
    endpoints: dict = field(
        default_factory=lambda: {
            "oracle": EndpointConfig(backend="stub"),
            "target_llm": EndpointConfig(backend="template_stub"),
        }
    )
    model: ModelConfig = field(default_factory=ModelConfig)
    stubs: StubsConfig = field(default_factory=StubsConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    sft: SftStageConfig = field(default_factory=SftStageConfig)
    reward: RewardStageConfig = field(default_factory=RewardStageConfig)
    rl: RlStageConfig = field(default_factory=RlStageConfig)
    eval: EvalStageConfig = field(default_factory=EvalStageConfig)
    base_dir: str = ""  # directory of the config file; resolves relative paths

    def validate(self) -> None:
        for name, ep in self.endpoints.items():
            if name not in ("oracle", "target_llm"):
                raise ConfigError(f"endpoints: unknown role {name!r}")
            ep.validate(name)
        for stage in ("warmup", "sft", "reward", "rl", "eval"):
            if stage not in self.seeds:
                raise ConfigError(f"seeds.{stage} is required")
        self.model.validate()
        self.warmup.validate()
        self.sft.to_sft_config(0)
        self.reward.validate()
        self.rl.validate()
        self.eval.validate()

    def resolve(self, path_str: str) -> Path:
        p = Path(path_str)
        if p.is_absolute() or not self.base_dir:
            return p
        return Path(self.base_dir) / p

    @property
    def run_path(self) -> Path:
        return self.resolve(self.run_dir)


_SECTION_TYPES = {
    "model": ModelConfig,
    "stubs": StubsConfig,
    "warmup": WarmupConfig,
    "sft": SftStageConfig,
    "reward": RewardStageConfig,
    "rl": RlStageConfig,
    "eval": EvalStageConfig,
}


def _build_section(cls, data: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for raw_key, value in data.items():
        key = _normalize_key(raw_key)
        if key not in known:
            raise ConfigError(f"{section}: unknown key {raw_key!r}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def parse_config_dict(data: dict, base_dir: str = "") -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    config = PipelineConfig(base_dir=base_dir)
    for raw_key, value in data.items():
        key = _normalize_key(raw_key)
        if key == "run_dir":
            config.run_dir = str(value)
        elif key == "seeds":
            if not isinstance(value, dict):
                raise ConfigError("seeds must be a mapping")
            config.seeds = {str(k): int(v) for k, v in value.items()}
        elif key == "endpoints":
            if not isinstance(value, dict):
                raise ConfigError("endpoints must be a mapping")
            config.endpoints = {
                str(name): _build_section(EndpointConfig, section, f"endpoints.{name}")
                for name, section in value.items()
            }
        elif key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a mapping")
            setattr(config, key, _build_section(_SECTION_TYPES[key], value, key))
        else:
            raise ConfigError(f"unknown top-level key {raw_key!r}")
    config.validate()
    return config


def load_config(path: Path) -> PipelineConfig:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    return parse_config_dict(data, base_dir=str(path.parent))


def config_to_dict(config: PipelineConfig) -> dict:
    out: dict[str, Any] = {
        "run_dir": config.run_dir,
        "seeds": dict(sorted(config.seeds.items())),
        "endpoints": {
            name: dataclasses.asdict(ep) for name, ep in sorted(config.endpoints.items())
        },
    }
    for key, _ in sorted(_SECTION_TYPES.items()):
        out[key] = dataclasses.asdict(getattr(config, key))
    return out


def serialize_config(config: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=True)


def save_config(config: PipelineConfig, path: Path) -> None:
    Path(path).write_text(serialize_config(config), encoding="utf-8")


def config_hash(config: PipelineConfig) -> str:
    payload = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def default_config_dict(base_dir: Path) -> dict:
    """Dict form of the default desk-scale config (written by the demo).

    Combination weights the original method leaves to experiment
    (alpha/beta/gamma) keep their 1.0 defaults except beta2: the
    best-response cross-entropy is an unnormalized sum over response
    tokens, so at weight 1.0 it dwarfs the per-token losses and drags the
    policy far from the reference without reward benefit at this scale.
    """
    config = PipelineConfig(base_dir=str(base_dir))
    config.run_dir = "run"
    config.sft.epochs = 20
    config.sft.learning_rate = 1e-3
    config.sft.gradient_accumulation_steps = 1
    config.reward.learning_rate = 1e-3
    config.rl.steps = 200
    config.rl.ppo_epochs = 2
    config.rl.learning_rate_actor = 1e-4
    config.rl.learning_rate_critic = 1e-3
    config.rl.beta2 = 0.03
    return config_to_dict(config)


def save_config_dict(data: dict, path: Path) -> None:
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")
