"""Acceptance suite: one test per release criterion, one PASS line each.

Heavy criteria (the end-to-end desk run, determinism, KL directionality)
train real pipelines on the bundled synthetic workspace; everything is
seeded, so the measured numbers are reproducible bit-for-bit on a given
machine.
"""

import hashlib
import json
import math
import random
import time
from dataclasses import replace

import pytest
import torch

from conftest import finite_difference_check
from mapo.lm_core.policy import (
    GenerationParams,
    PolicyHandle,
    ToyBackend,
    clone_frozen,
    encode_sequence,
    prompt_sequence,
)
from mapo.lm_core.tokenizer import WordTokenizer
from mapo.lm_core.toy import ToyLM, ToyLMConfig, ValueModel
from mapo.eval_harness import MetricReport, compare_runs
from mapo.pipeline import stages
from mapo.pipeline.config import load_config, save_config
from mapo.reward_model import (
    RankingPair,
    RankingPairBatch,
    RewardModel,
    pairwise_ranking_loss,
    ranking_loss_from_margins,
    train_reward,
)
from mapo.rl_trainer.losses import (
    compute_advantages,
    kl_sft_loss,
    policy_loss,
    pretrain_loss,
    rrmf_best_ce_loss,
    rrmf_rank_loss,
    value_loss,
)
from mapo.rl_trainer.rollout import Episode, RolloutBatch, Transition, collect_rollouts, recompute_live
from mapo.rl_trainer.rrmf import sample_rrmf_batch
from mapo.rl_trainer.train import _live_rrmf, mean_reward_of_policy
from mapo.rl_trainer.weights import LossWeights
from mapo.sft_trainer import SftExample, sft_loss
from mapo.synthetic import write_workspace
from mapo.text_metrics import (
    TaskKind,
    lcs_length,
    normalized_edit_distance,
    rouge_l,
    token_f1,
    tokenize,
)
from test_text_metrics import f1_oracle, rouge_oracle

torch.set_num_threads(1)


def report(name, detail):
    print(f"\n[PASS] {name}: {detail}")


# --- 1. Metric oracle equivalence ---------------------------------------------------


def test_metric_oracle_equivalence():
    start = time.time()
    rng = random.Random(2024)
    alphabet = ["alpha", "beta", "gamma", "delta", "eps", "zeta"]
    worst = 0.0
    for _ in range(200):
        a = tokenize(" ".join(rng.choice(alphabet) for _ in range(rng.randint(0, 12))))
        b = tokenize(" ".join(rng.choice(alphabet) for _ in range(rng.randint(0, 12))))
        dr = abs(rouge_l(a, b) - rouge_oracle(a.tokens, b.tokens))
        df = abs(token_f1(a, b) - f1_oracle(a.tokens, b.tokens))
        assert dr <= 1e-9 and df <= 1e-9
        assert lcs_length(a, b) == lcs_length(b, a)
        worst = max(worst, dr, df)
    elapsed = time.time() - start
    assert elapsed < 10.0
    report("metric oracle equivalence", f"200 pairs, worst |delta|={worst:.2e}, {elapsed:.2f}s")


# --- 2. Edit-distance contract ---------------------------------------------------------


def test_edit_distance_contract():
    rng = random.Random(7)
    for _ in range(1000):
        a = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 10)))
        b = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 10)))
        d = normalized_edit_distance(a, b)
        assert 0.0 <= d <= 1.0
        assert (d == 0.0) == (a == b)
    exact = normalized_edit_distance("abc", "abd")
    assert exact == 1 / 3
    report("edit-distance contract", f"1000 random pairs in [0,1], ('abc','abd')={exact:.6f}")


# --- 3. Gradient suite -----------------------------------------------------------------


def _grad_world():
    tok = WordTokenizer([f"w{i}" for i in range(10)])
    config = ToyLMConfig(vocab_size=tok.vocab_size, context_size=48, d_model=16)
    actor = PolicyHandle(role="actor", backend=ToyBackend(ToyLM(config, seed=1), tok))
    frozen = clone_frozen(actor)
    with torch.no_grad():  # make actor and reference distinct
        for p in actor.toy_model.parameters():
            p.add_(0.01)
    critic = ValueModel.from_backbone(actor.toy_model)
    with torch.no_grad():
        torch.nn.init.normal_(
            critic.value_head.weight, std=0.1, generator=torch.Generator().manual_seed(8)
        )
    reward = RewardModel.from_policy(actor)
    with torch.no_grad():
        torch.nn.init.normal_(
            reward.scalar_head.weight, std=0.3, generator=torch.Generator().manual_seed(4)
        )
    for p in reward.parameters():
        p.requires_grad_(False)
    prompts = [prompt_sequence(tok, f"w{i} w{i + 1}") for i in range(3)]
    params = GenerationParams(temperature=0.8, max_tokens=5, seed=6)
    batch = collect_rollouts(actor, frozen, critic, reward, prompts, params)
    compute_advantages(batch, LossWeights())
    return actor, frozen, critic, reward, batch, prompts, params, tok


def test_gradient_suite():
    start = time.time()
    actor, frozen, critic, reward, batch, prompts, params, tok = _grad_world()
    w = LossWeights()
    results = {}

    sft_batch = [
        SftExample(input_text="w1 w2", target_text="w3 w4", task=TaskKind.GENERATION),
        SftExample(input_text="w5", target_text="w6 w7", task=TaskKind.GENERATION),
    ]
    results["sft_ce"] = finite_difference_check(
        lambda: sft_loss(actor, sft_batch), actor.toy_model, seed=10
    )

    reward_train = RewardModel.from_policy(actor)
    with torch.no_grad():
        torch.nn.init.normal_(
            reward_train.scalar_head.weight, std=0.3, generator=torch.Generator().manual_seed(5)
        )
    rank_batch = RankingPairBatch(
        items=(RankingPair("w1 w2", "w3 w4", "w3"), RankingPair("w5", "w6", "w7 w8")), k=2
    )
    results["ranking"] = finite_difference_check(
        lambda: pairwise_ranking_loss(reward_train, rank_batch), reward_train, seed=11
    )

    results["l_pg"] = finite_difference_check(
        lambda: policy_loss(recompute_live(batch, actor, critic, frozen), w),
        actor.toy_model,
        seed=12,
    )
    results["l_v"] = finite_difference_check(
        lambda: value_loss(recompute_live(batch, actor, critic, frozen), w),
        critic,
        seed=13,
    )
    results["l_kl"] = finite_difference_check(
        lambda: kl_sft_loss(recompute_live(batch, actor, critic, frozen), w),
        actor.toy_model,
        seed=14,
    )

    rrmf = sample_rrmf_batch(actor, reward, prompts[0], 4, replace(params, seed=99))
    assert rrmf is not None and len(rrmf.responses) >= 2
    results["l_rank"] = finite_difference_check(
        lambda: rrmf_rank_loss(_live_rrmf(actor, rrmf), w), actor.toy_model, seed=15
    )
    results["l_ft"] = finite_difference_check(
        lambda: rrmf_best_ce_loss(actor, rrmf), actor.toy_model, seed=16
    )

    pretrain = [encode_sequence(tok, "w0 w1 w2"), encode_sequence(tok, "w3 w4")]
    results["l_pre"] = finite_difference_check(
        lambda: pretrain_loss(actor, pretrain, w), actor.toy_model, seed=17
    )

    elapsed = time.time() - start
    assert elapsed < 120.0
    assert len(results) == 8
    worst = max(results.values())
    report(
        "gradient suite",
        f"8 losses x 20 coords, worst rel err={worst:.2e} (<=1e-4), {elapsed:.1f}s",
    )


# --- 4. Ranking-loss anchors ------------------------------------------------------------


def test_ranking_loss_anchors():
    zero = float(ranking_loss_from_margins(torch.zeros(1, dtype=torch.float64), k=2))
    assert abs(zero - math.log(2)) <= 1e-9
    one = float(ranking_loss_from_margins(torch.ones(1, dtype=torch.float64), k=2))
    expected = -math.log(1.0 / (1.0 + math.exp(-1.0)))
    assert abs(one - expected) <= 1e-9
    margins = torch.linspace(-5.0, 5.0, 50, dtype=torch.float64)
    losses = [float(ranking_loss_from_margins(m.reshape(1), k=2)) for m in margins]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    report(
        "ranking-loss anchors",
        f"log2={zero:.12f}, -log sigmoid(1)={one:.12f}, strictly decreasing over 50 margins",
    )


# --- 5. Reward-model convergence -----------------------------------------------------------


def test_reward_model_convergence():
    start = time.time()
    words = [f"w{i}" for i in range(10)] + ["marker"]
    tok = WordTokenizer(words)
    rng = random.Random(42)

    def make_y(markers, fill):
        toks = ["marker"] * markers + [rng.choice(words[:10]) for _ in range(fill)]
        rng.shuffle(toks)
        return " ".join(toks)

    pairs = []
    for _ in range(500):
        x = " ".join(rng.choice(words[:10]) for _ in range(4))
        hi = rng.randint(1, 5)
        lo = rng.randint(0, hi - 1)
        pairs.append(RankingPair(x=x, y_w=make_y(hi, 8 - hi), y_l=make_y(lo, 8 - lo)))
    rng.shuffle(pairs)
    holdout = RankingPairBatch(items=tuple(pairs[:100]), k=2)
    train_items = pairs[100:]
    batches = [
        RankingPairBatch(items=tuple(train_items[i : i + 16]), k=2)
        for i in range(0, len(train_items), 16)
    ]
    model = RewardModel(
        ToyLM(ToyLMConfig(vocab_size=tok.vocab_size, context_size=32, d_model=32), seed=1), tok
    )
    model, acc = train_reward(
        model, batches, epochs=20, learning_rate=1e-3, seed=5, holdout=holdout
    )
    elapsed = time.time() - start
    assert elapsed < 300.0
    assert max(acc) >= 0.95
    assert acc[-1] >= 0.95
    report(
        "reward-model convergence",
        f"500 planted pairs, held-out acc={acc[-1]:.3f} (best {max(acc):.3f}), {elapsed:.0f}s",
    )


# --- 6. Advantage formula --------------------------------------------------------------------


def test_advantage_formula_hand_checked():
    w = LossWeights(gae_lambda=0.0, discount_gamma=0.99)
    rewards = [0.0, 0.5, 0.0, -0.3, 1.0]
    values = [0.8, 0.6, 0.4, 0.2, 0.1]
    transitions = [
        Transition(token=0, actor_logprob=-1.0, frozen_logprob=-1.0, value_estimate=v, reward=r)
        for r, v in zip(rewards, values)
    ]
    ep = Episode(
        prompt=encode_sequence(WordTokenizer(["a"]), "a"),
        response=encode_sequence(WordTokenizer(["a"]), "a a a a a"),
        transitions=transitions,
        terminal_reward=1.0,
    )
    compute_advantages(RolloutBatch(episodes=[ep]), w)
    worst = 0.0
    for t in range(5):
        v_next = values[t + 1] if t + 1 < 5 else 0.0
        expected = rewards[t] + 0.99 * v_next - values[t]
        err = abs(transitions[t].advantage - expected)
        worst = max(worst, err)
        assert err <= 1e-9
    report("advantage formula", f"5-step hand check, gamma=0.99, worst |err|={worst:.2e}")


# --- 7 + 8 + 9. pipeline-level criteria -------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Full pipeline on the bundled synthetic workspace, default config."""
    tmp = tmp_path_factory.mktemp("desk")
    start = time.time()
    cfg = load_config(write_workspace(tmp))
    stages.cmd_warmup(cfg)
    stages.cmd_sft(cfg)
    stages.cmd_reward(cfg)
    stages.cmd_rl(cfg)
    return cfg, time.time() - start


def test_end_to_end_desk_run(desk_run):
    cfg, elapsed = desk_run
    assert cfg.rl.steps == 200
    assert cfg.rl.loss_weights().beta_kl == LossWeights().beta_kl == 1.0
    tok = stages._load_tokenizer(cfg)
    reward = stages.load_reward_model(cfg, tok)
    prompts = stages.rl_prompt_sequences(cfg, tok)
    params = GenerationParams(
        temperature=cfg.rl.temperature, max_tokens=cfg.rl.max_tokens, seed=999
    )
    sft_actor = stages._load_actor(cfg, tok, stages._sft_checkpoint_dir(cfg))
    rl_actor = stages._load_actor(cfg, tok, stages._rl_checkpoint_dir(cfg))
    sft_mean = mean_reward_of_policy(sft_actor, reward, prompts, params)
    rl_mean = mean_reward_of_policy(rl_actor, reward, prompts, params)
    metrics = [
        json.loads(line)
        for line in (cfg.run_path / "rl" / "metrics.jsonl").read_text().splitlines()
    ]
    final_kl = metrics[-1]["kl_per_token"]
    assert sft_mean > 0
    assert rl_mean >= 1.2 * sft_mean
    assert final_kl <= 0.5
    assert elapsed < 900.0
    report(
        "end-to-end desk run",
        f"200 updates: reward {sft_mean:.3f}->{rl_mean:.3f} "
        f"(x{rl_mean / sft_mean:.2f} >= 1.2), KL/token={final_kl:.3f} <= 0.5, {elapsed:.0f}s",
    )


def _directionality_run(tmp, beta_kl):
    cfg_path = write_workspace(tmp, n_warmup=24, n_rl=8, n_eval=4, n_pretrain=8)
    cfg = load_config(cfg_path)
    cfg.sft.epochs = 10
    cfg.reward.epochs = 10
    cfg.rl.steps = 60
    cfg.rl.beta_kl = beta_kl
    save_config(cfg, cfg_path)
    cfg = load_config(cfg_path)
    stages.cmd_warmup(cfg)
    stages.cmd_sft(cfg)
    stages.cmd_reward(cfg)
    stages.cmd_rl(cfg)
    metrics = [
        json.loads(line)
        for line in (cfg.run_path / "rl" / "metrics.jsonl").read_text().splitlines()
    ]
    return metrics[-1]["kl_per_token"]


def test_kl_directionality(tmp_path):
    kl_off = _directionality_run(tmp_path / "beta0", beta_kl=0.0)
    kl_on = _directionality_run(tmp_path / "beta1", beta_kl=1.0)
    kl_huge = _directionality_run(tmp_path / "beta50", beta_kl=50.0)
    assert kl_off > kl_on
    assert kl_huge < 0.05  # penalty dominance pins the policy to the reference
    report(
        "KL directionality",
        f"same seed: beta_kl=0 final KL {kl_off:.4f} > beta_kl=1.0 final KL {kl_on:.4f}; "
        f"beta_kl=50 final KL {kl_huge:.4f} < 0.05",
    )


def _hash_tree(run_path):
    digests = {}
    for path in sorted(run_path.rglob("*")):
        if path.is_dir() or path.name == "manifest.json" and path.parent == run_path:
            continue  # the run manifest carries timestamps; everything else is compared
        rel = path.relative_to(run_path).as_posix()
        digests[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digests


def _determinism_run(tmp):
    cfg_path = write_workspace(tmp, n_warmup=12, n_rl=4, n_eval=4, n_pretrain=4)
    cfg = load_config(cfg_path)
    cfg.warmup.candidates_per_prompt = 8
    cfg.sft.epochs = 3
    cfg.reward.epochs = 3
    cfg.rl.steps = 4
    cfg.rl.episodes_per_step = 4
    save_config(cfg, cfg_path)
    cfg = load_config(cfg_path)
    stages.cmd_warmup(cfg)
    stages.cmd_sft(cfg)
    stages.cmd_reward(cfg)
    stages.cmd_rl(cfg)
    stages.cmd_eval(cfg)
    return _hash_tree(cfg.run_path)


def test_full_pipeline_determinism(tmp_path):
    first = _determinism_run(tmp_path / "run_a")
    second = _determinism_run(tmp_path / "run_b")
    assert first.keys() == second.keys()
    mismatched = [rel for rel in first if first[rel] != second[rel]]
    assert mismatched == []
    report(
        "determinism",
        f"two pipeline runs, {len(first)} artifacts byte-identical "
        "(datasets, metrics logs, checkpoints, reports)",
    )


# --- 10. Zero-baseline guard ---------------------------------------------------------------


def test_zero_baseline_guard():
    baseline = MetricReport.from_scores("news", TaskKind.CLASSIFICATION, [0.0, 0.0, 0.0])
    treatment = MetricReport.from_scores("news", TaskKind.CLASSIFICATION, [0.055, 0.055, 0.055])
    row = compare_runs(baseline, treatment)
    assert row.relative_pct is None
    assert row.absolute_delta > 0
    report("zero-baseline guard", "0.0 baseline flags relative improvement undefined ('-')")
