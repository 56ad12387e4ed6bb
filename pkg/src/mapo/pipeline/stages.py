"""Stage implementations behind the CLI subcommands.

Each cmd_* function enforces manifest ordering (upstream stages must have
completed; a completed stage is only rerun with force=True), runs its
module, writes artifacts under the run directory, and records the stage
with artifact digests. All stages are deterministic given the config
seeds and stub/toy backends.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import random
from pathlib import Path

import torch

from mapo.errors import ConfigError, PipelineError
from mapo.eval_harness import (
    MetricReport,
    compare_runs,
    evaluate_prompts,
    write_improvement_csv,
    write_raw_scores_csv,
    write_report_csv,
)
from mapo.lm_core import checkpoint
from mapo.lm_core.policy import (
    GenerationParams,
    ParaphraserBackend,
    PolicyHandle,
    RemoteBackend,
    TemplateTargetBackend,
    TokenSequence,
    ToyBackend,
    clone_frozen,
    encode_sequence,
    generate,
    prompt_sequence,
)
from mapo.lm_core.remote import RemoteClient
from mapo.lm_core.stubs import StubParaphraser, TemplateTarget
from mapo.lm_core.tokenizer import WordTokenizer
from mapo.lm_core.toy import ToyLM, ToyLMConfig, ValueModel
from mapo.pipeline.config import PipelineConfig, config_hash
from mapo.pipeline.manifest import RunManifest
from mapo.reward_model import (
    RankingPair,
    RankingPairBatch,
    RewardModel,
    calibrate_scores,
    train_reward,
    write_ranking_pairs,
)
from mapo.rl_trainer.train import RlRunConfig, optimize_prompt, train_rl, write_metrics
from mapo.sft_trainer import TASK_PREFIXES, format_sft_example, train_sft
from mapo.synthetic import vocabulary_words
from mapo.text_metrics import TaskKind
from mapo.warmup_builder import (
    WIRE_TO_TASK,
    build_warmup_record,
    emit_warmup_dataset,
    enumerate_ranking_pairs,
    load_warmup_dataset,
)

logger = logging.getLogger(__name__)

TOKENIZER_FILE = "tokenizer.json"


def _load_jsonl(path: Path) -> list[dict]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for line in text.splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records


def _task_of(record: dict) -> TaskKind:
    task = record.get("task", "generation")
    if task not in WIRE_TO_TASK:
        raise PipelineError(f"unknown task {task!r} in input record")
    return WIRE_TO_TASK[task]


def _setup(config: PipelineConfig) -> RunManifest:
    torch.set_num_threads(1)
    run_dir = config.run_path
    run_dir.mkdir(parents=True, exist_ok=True)
    return RunManifest.load_or_create(run_dir, config_hash(config))


def build_tokenizer(config: PipelineConfig) -> WordTokenizer:
    """Deterministic closed vocabulary over every configured input file."""
    words: set[str] = set(vocabulary_words())
    words.update(config.stubs.template_words)
    words.update(config.stubs.instruction_words)
    words.update(config.stubs.paraphraser_politeness)
    for prefix in TASK_PREFIXES.values():
        words.update(prefix.split())
    for file_attr, section in (
        ("prompts_file", config.warmup),
        ("prompts_file", config.rl),
        ("pretrain_file", config.rl),
        ("records_file", config.eval),
    ):
        path = config.resolve(getattr(section, file_attr))
        if not path.exists():
            continue
        for record in _load_jsonl(path):
            for key in ("prompt", "reference", "text"):
                if key in record:
                    words.update(str(record[key]).split())
    return WordTokenizer(sorted(words))


def _load_tokenizer(config: PipelineConfig) -> WordTokenizer:
    path = config.run_path / TOKENIZER_FILE
    if not path.exists():
        raise PipelineError("tokenizer not found; run the warmup stage first")
    return WordTokenizer.from_json(path.read_text(encoding="utf-8"))


def _oracle_handle(config: PipelineConfig, tokenizer: WordTokenizer, seed: int) -> PolicyHandle:
    ep = config.endpoints["oracle"]
    if ep.backend == "stub":
        stub = StubParaphraser(seed=seed, politeness=tuple(config.stubs.paraphraser_politeness))
        return PolicyHandle(role="oracle", backend=ParaphraserBackend(stub, tokenizer))
    if ep.backend == "remote":
        return PolicyHandle(role="oracle", backend=RemoteBackend(RemoteClient(ep.url), tokenizer))
    raise ConfigError(f"oracle backend {ep.backend!r} is not runnable in this pipeline")


def _target_handle(config: PipelineConfig, tokenizer: WordTokenizer) -> PolicyHandle:
    ep = config.endpoints["target_llm"]
    if ep.backend == "template_stub":
        stub = TemplateTarget(
            template_words=tuple(config.stubs.template_words),
            instruction_words=tuple(config.stubs.instruction_words),
        )
        return PolicyHandle(role="target_llm", backend=TemplateTargetBackend(stub, tokenizer))
    if ep.backend == "remote":
        return PolicyHandle(role="target_llm", backend=RemoteBackend(RemoteClient(ep.url), tokenizer))
    raise ConfigError(f"target backend {ep.backend!r} is not runnable in this pipeline")


def _model_config(config: PipelineConfig, tokenizer: WordTokenizer) -> ToyLMConfig:
    return ToyLMConfig(
        vocab_size=tokenizer.vocab_size,
        context_size=config.model.context_size,
        d_model=config.model.d_model,
        n_heads=config.model.n_heads,
        n_layers=config.model.n_layers,
    )


def _load_actor(config: PipelineConfig, tokenizer: WordTokenizer, ckpt_dir: Path) -> PolicyHandle:
    model = ToyLM(_model_config(config, tokenizer), seed=config.model.init_seed)
    checkpoint.load_checkpoint(ckpt_dir, model)
    return PolicyHandle(role="actor", backend=ToyBackend(model, tokenizer))


def _sft_checkpoint_dir(config: PipelineConfig) -> Path:
    return config.run_path / "sft" / f"epoch_{config.sft.epochs}"


def _rl_checkpoint_dir(config: PipelineConfig) -> Path:
    return config.run_path / "rl" / f"step_{config.rl.steps}"


# ---------------------------------------------------------------------------
# warmup
# ---------------------------------------------------------------------------

def cmd_warmup(config: PipelineConfig, force: bool = False) -> dict:
    manifest = _setup(config)
    manifest.guard_rerun("warmup", force)
    seed = config.seeds["warmup"]
    tokenizer = build_tokenizer(config)
    tokenizer_path = config.run_path / TOKENIZER_FILE
    tokenizer_path.write_text(tokenizer.to_json(), encoding="utf-8")

    oracle = _oracle_handle(config, tokenizer, seed)
    target = _target_handle(config, tokenizer)
    params = GenerationParams(
        temperature=config.warmup.temperature,
        max_tokens=config.warmup.max_tokens,
        seed=seed,
    )
    prompts_path = config.resolve(config.warmup.prompts_file)
    records = _load_jsonl(prompts_path) if prompts_path.exists() else []
    dataset_path = config.run_path / "warmup" / "dataset.jsonl"
    try:
        pairs = []
        sequences = []
        for record in records:
            task = _task_of(record)
            reference = record.get("reference", "")
            if not reference:
                # Ground truth absent: the oracle's own reply stands in.
                reference = generate(
                    oracle, prompt_sequence(tokenizer, record["prompt"]), params
                ).text
            pair, seq = build_warmup_record(
                original=record["prompt"],
                task=task,
                dataset_name=record.get("dataset", ""),
                reference=reference,
                oracle=oracle,
                target=target,
                n_candidates=config.warmup.candidates_per_prompt,
                params=params,
            )
            pairs.append(pair)
            sequences.append(seq)
        count = emit_warmup_dataset(pairs, sequences, dataset_path)
    except Exception:
        # Endpoint/IO failures must not leave partial stage outputs around.
        dataset_path.unlink(missing_ok=True)
        tokenizer_path.unlink(missing_ok=True)
        raise
    manifest.record_stage(
        "warmup", seed, [dataset_path, tokenizer_path], extra={"count": count}
    )
    return {"count": count, "dataset": str(dataset_path)}


# ---------------------------------------------------------------------------
# sft
# ---------------------------------------------------------------------------

def cmd_sft(config: PipelineConfig, force: bool = False) -> dict:
    manifest = _setup(config)
    manifest.require_stage("warmup")
    manifest.guard_rerun("sft", force)
    if config.sft.epochs < 1:
        raise PipelineError("sft.epochs must be >= 1 to produce a checkpoint")
    seed = config.seeds["sft"]
    tokenizer = _load_tokenizer(config)
    pairs, _ = load_warmup_dataset(config.run_path / "warmup" / "dataset.jsonl")
    if not pairs:
        raise PipelineError("warm-up dataset is empty; nothing to fine-tune on")
    dataset = [format_sft_example(p) for p in pairs]
    model = ToyLM(_model_config(config, tokenizer), seed=config.model.init_seed)
    handle = PolicyHandle(role="actor", backend=ToyBackend(model, tokenizer))
    sft_dir = config.run_path / "sft"
    _, losses = train_sft(handle, dataset, config.sft.to_sft_config(seed), run_dir=sft_dir)
    losses_path = sft_dir / "losses.json"
    losses_path.write_text(json.dumps(losses), encoding="utf-8")
    final = _sft_checkpoint_dir(config)
    manifest.record_stage(
        "sft", seed,
        [final / "params.bin", final / "manifest.json", losses_path],
        extra={"final_loss": losses[-1]},
    )
    return {"losses": losses, "checkpoint": str(final)}


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------

def ranking_batches_from_warmup(config: PipelineConfig) -> list[RankingPairBatch]:
    """One RankingPairBatch per warm-up prompt, x carrying the task prefix."""
    pairs, sequences = load_warmup_dataset(config.run_path / "warmup" / "dataset.jsonl")
    batches = []
    for pair, seq in zip(pairs, sequences):
        entries = seq.entries
        band = config.reward.ranking_band
        if band > 0 and len(entries) > 2 * band:
            entries = entries[:band] + entries[-band:]
            seq = dataclasses.replace(seq, entries=entries, original_index=0)
        x = TASK_PREFIXES[pair.task] + pair.original
        items = []
        seen = set()
        for winner, loser in enumerate_ranking_pairs(seq):
            if winner.prompt_text == loser.prompt_text:
                continue
            key = (winner.prompt_text, loser.prompt_text)
            if key in seen:
                continue
            seen.add(key)
            items.append(RankingPair(x=x, y_w=winner.prompt_text, y_l=loser.prompt_text))
        if items:
            batches.append(RankingPairBatch(items=tuple(items), k=max(seq.k, 2)))
    return batches


def cmd_reward(config: PipelineConfig, force: bool = False) -> dict:
    manifest = _setup(config)
    manifest.require_stage("warmup")
    manifest.require_stage("sft")
    manifest.guard_rerun("reward", force)
    seed = config.seeds["reward"]
    tokenizer = _load_tokenizer(config)
    batches = ranking_batches_from_warmup(config)
    if not batches:
        raise PipelineError("no strict ranking pairs in the warm-up dataset")
    rng = random.Random(seed)
    indices = list(range(len(batches)))
    rng.shuffle(indices)
    n_holdout = int(len(batches) * config.reward.holdout_fraction)
    holdout_idx = set(indices[:n_holdout])
    train_batches = [b for i, b in enumerate(batches) if i not in holdout_idx]
    holdout_items = tuple(
        item for i, b in enumerate(batches) if i in holdout_idx for item in b.items
    )
    holdout = (
        RankingPairBatch(items=holdout_items, k=batches[0].k) if holdout_items else None
    )

    pairs_path = config.run_path / "reward" / "ranking_pairs.jsonl"
    write_ranking_pairs(pairs_path, batches)

    sft_handle = _load_actor(config, tokenizer, _sft_checkpoint_dir(config))
    model = RewardModel.from_policy(sft_handle)
    model, accuracy_log = train_reward(
        model,
        train_batches,
        epochs=config.reward.epochs,
        learning_rate=config.reward.learning_rate,
        weight_decay=config.reward.weight_decay,
        adam_epsilon=config.reward.adam_epsilon,
        seed=seed,
        holdout=holdout,
    )
    if config.reward.calibrate_bias:
        calibrate_scores(model, _flatten_batches(train_batches))
    model_dir = config.run_path / "reward" / "model"
    checkpoint.save_checkpoint(
        model_dir, model,
        {"epoch": config.reward.epochs, "loss": 0.0, "seed": seed,
         "config_hash": config_hash(config)},
    )
    accuracy_path = config.run_path / "reward" / "accuracy.json"
    accuracy_path.write_text(json.dumps(accuracy_log), encoding="utf-8")
    manifest.record_stage(
        "reward", seed,
        [pairs_path, model_dir / "params.bin", model_dir / "manifest.json", accuracy_path],
        extra={"final_accuracy": accuracy_log[-1] if accuracy_log else None},
    )
    return {"accuracy": accuracy_log, "pairs": str(pairs_path)}


def _flatten_batches(batches: list[RankingPairBatch]) -> RankingPairBatch:
    items = tuple(item for b in batches for item in b.items)
    return RankingPairBatch(items=items, k=batches[0].k)


def load_reward_model(config: PipelineConfig, tokenizer: WordTokenizer) -> RewardModel:
    model = RewardModel(
        ToyLM(_model_config(config, tokenizer), seed=config.model.init_seed), tokenizer
    )
    checkpoint.load_checkpoint(config.run_path / "reward" / "model", model)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# rl
# ---------------------------------------------------------------------------

def rl_prompt_sequences(config: PipelineConfig, tokenizer: WordTokenizer) -> list[TokenSequence]:
    records = _load_jsonl(config.resolve(config.rl.prompts_file))
    prompts = []
    for record in records:
        task = _task_of(record)
        prompts.append(prompt_sequence(tokenizer, TASK_PREFIXES[task] + record["prompt"]))
    return prompts


def cmd_rl(config: PipelineConfig, force: bool = False) -> dict:
    manifest = _setup(config)
    manifest.require_stage("sft")
    manifest.require_stage("reward")
    manifest.guard_rerun("rl", force)
    seed = config.seeds["rl"]
    tokenizer = _load_tokenizer(config)
    actor = _load_actor(config, tokenizer, _sft_checkpoint_dir(config))
    frozen = clone_frozen(actor)
    critic = ValueModel.from_backbone(actor.toy_model)
    reward = load_reward_model(config, tokenizer)
    prompts = rl_prompt_sequences(config, tokenizer)
    if not prompts:
        raise PipelineError("rl prompts file is empty")

    pretrain_path = config.resolve(config.rl.pretrain_file)
    pretrain_data: list[TokenSequence] = []
    if pretrain_path.exists() and config.rl.pretrain_sample_rate > 0:
        texts = [r["text"] for r in _load_jsonl(pretrain_path)]
        n_take = math.ceil(len(texts) * config.rl.pretrain_sample_rate)
        rng = random.Random(seed)
        chosen = sorted(rng.sample(range(len(texts)), n_take)) if texts else []
        pretrain_data = [encode_sequence(tokenizer, texts[i]) for i in chosen]

    w = config.rl.loss_weights()
    run = RlRunConfig(
        steps=config.rl.steps,
        episodes_per_step=config.rl.episodes_per_step,
        rrmf_k=config.rl.rrmf_k,
        rrmf_prompts_per_step=config.rl.rrmf_prompts_per_step,
        pretrain_batch_size=config.rl.pretrain_batch_size,
        learning_rate_actor=config.rl.learning_rate_actor,
        learning_rate_critic=config.rl.learning_rate_critic,
        adam_epsilon=config.rl.adam_epsilon,
        weight_decay=config.rl.weight_decay,
        seed=seed,
        checkpoint_every=config.rl.checkpoint_every,
    )
    params = GenerationParams(
        temperature=config.rl.temperature, max_tokens=config.rl.max_tokens, seed=seed
    )
    rl_dir = config.run_path / "rl"
    _, metrics = train_rl(
        actor, critic, frozen, reward, prompts, pretrain_data, w, run, params, run_dir=rl_dir
    )
    metrics_path = rl_dir / "metrics.jsonl"
    write_metrics(metrics_path, metrics)
    final = _rl_checkpoint_dir(config)
    manifest.record_stage(
        "rl", seed,
        [metrics_path, final / "params.bin", final / "manifest.json"],
        extra={"steps": config.rl.steps},
    )
    return {"metrics": str(metrics_path), "checkpoint": str(final)}


# ---------------------------------------------------------------------------
# optimize
# ---------------------------------------------------------------------------

def cmd_optimize(config: PipelineConfig, prompt: str, task: TaskKind) -> str:
    manifest = _setup(config)
    tokenizer = _load_tokenizer(config)
    if manifest.has_stage("rl"):
        ckpt = _rl_checkpoint_dir(config)
    elif manifest.has_stage("sft"):
        ckpt = _sft_checkpoint_dir(config)
    else:
        raise PipelineError("no RL or SFT checkpoint available; train first")
    actor = _load_actor(config, tokenizer, ckpt)
    params = GenerationParams(temperature=0.0, max_tokens=config.rl.max_tokens, seed=0)
    return optimize_prompt(actor, task, prompt, params)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(config: PipelineConfig, force: bool = False) -> dict:
    manifest = _setup(config)
    manifest.require_stage("sft")
    manifest.require_stage("rl")
    manifest.guard_rerun("eval", force)
    seed = config.seeds["eval"]
    tokenizer = _load_tokenizer(config)
    target = _target_handle(config, tokenizer)
    sft_actor = _load_actor(config, tokenizer, _sft_checkpoint_dir(config))
    rl_actor = _load_actor(config, tokenizer, _rl_checkpoint_dir(config))
    records = _load_jsonl(config.resolve(config.eval.records_file))
    if not records:
        raise PipelineError("eval records file is empty")
    params = GenerationParams(
        temperature=config.eval.temperature, max_tokens=config.eval.max_tokens, seed=seed
    )
    rewrite_params = GenerationParams(temperature=0.0, max_tokens=config.rl.max_tokens, seed=seed)

    by_dataset: dict[tuple[str, TaskKind], dict[str, list[tuple[str, str]]]] = {}
    for record in records:
        task = _task_of(record)
        dataset = record.get("dataset", "eval")
        variants = {
            "original": record["prompt"],
            "sft": optimize_prompt(sft_actor, task, record["prompt"], rewrite_params),
            "rl": optimize_prompt(rl_actor, task, record["prompt"], rewrite_params),
        }
        bucket = by_dataset.setdefault((dataset, task), {"original": [], "sft": [], "rl": []})
        for name, prompt in variants.items():
            bucket[name].append((prompt, record["reference"]))

    display_reports: list[MetricReport] = []
    improvements = []
    for (dataset, task), bucket in sorted(by_dataset.items(), key=lambda kv: kv[0][0]):
        variant_reports = {
            name: evaluate_prompts(target, pairs, task, params, dataset_name=dataset)
            for name, pairs in bucket.items()
        }
        for name in ("original", "sft", "rl"):
            display_reports.append(
                dataclasses.replace(variant_reports[name], dataset_name=f"{dataset}/{name}")
            )
        row_sft = compare_runs(variant_reports["original"], variant_reports["sft"])
        row_rl = compare_runs(variant_reports["sft"], variant_reports["rl"])
        improvements.append(
            dataclasses.replace(row_sft, dataset_name=f"{dataset}/sft_vs_original")
        )
        improvements.append(
            dataclasses.replace(row_rl, dataset_name=f"{dataset}/rl_vs_sft")
        )

    eval_dir = config.run_path / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    report_path = eval_dir / "report.csv"
    raw_path = eval_dir / "raw_scores.csv"
    improvement_path = eval_dir / "improvement.csv"
    write_report_csv(report_path, display_reports)
    write_raw_scores_csv(raw_path, display_reports)
    write_improvement_csv(improvement_path, improvements)
    manifest.record_stage("eval", seed, [report_path, raw_path, improvement_path])
    return {
        "report": str(report_path),
        "raw_scores": str(raw_path),
        "improvement": str(improvement_path),
    }
