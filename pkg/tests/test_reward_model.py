import math
import random

import pytest
import torch

from conftest import finite_difference_check
from mapo.lm_core.policy import PolicyHandle, ToyBackend
from mapo.lm_core.tokenizer import WordTokenizer
from mapo.lm_core.toy import ToyLM, ToyLMConfig
from mapo.reward_model import (
    RankingPair,
    RankingPairBatch,
    RewardModel,
    calibrate_scores,
    load_ranking_pairs,
    pairwise_accuracy,
    pairwise_ranking_loss,
    ranking_loss_from_margins,
    score,
    train_reward,
    write_ranking_pairs,
)


def make_model(seed=0, d_model=16, context=32):
    tok = WordTokenizer([f"w{i}" for i in range(10)] + ["marker"])
    lm = ToyLM(ToyLMConfig(vocab_size=tok.vocab_size, context_size=context, d_model=d_model), seed=seed)
    return RewardModel(lm, tok)


def batch_of(items, k=2):
    return RankingPairBatch(items=tuple(items), k=k)


# --- scoring ---------------------------------------------------------------------


def test_zero_head_scores_zero():
    model = make_model()
    assert score(model, "w1 w2", "w3") == 0.0
    assert score(model, "w5", "w6 w7") == 0.0


def test_score_deterministic_after_training_step():
    model = make_model()
    batch = batch_of([RankingPair("w1", "w2 marker", "w2")])
    loss = pairwise_ranking_loss(model, batch)
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            p.sub_(0.01 * (p.grad if p.grad is not None else torch.zeros_like(p)))
    assert score(model, "w1 w2", "w3") == score(model, "w1 w2", "w3")


def test_batched_scores_match_single(tmp_path):
    model = make_model(seed=5)
    with torch.no_grad():
        torch.nn.init.normal_(model.scalar_head.weight, std=0.5,
                              generator=torch.Generator().manual_seed(1))
    pairs = [("w1 w2", "w3"), ("w4", "w5 w6 w7"), ("w8 w9 w0", "marker")]
    batched = model.scores_batch(pairs)
    for i, (x, y) in enumerate(pairs):
        assert math.isclose(float(batched[i].detach()), score(model, x, y), rel_tol=1e-9, abs_tol=1e-9)


def test_from_policy_copies_backbone():
    tok = WordTokenizer(["a", "b"])
    lm = ToyLM(ToyLMConfig(vocab_size=tok.vocab_size, context_size=16, d_model=16), seed=2)
    handle = PolicyHandle(role="actor", backend=ToyBackend(lm, tok))
    model = RewardModel.from_policy(handle)
    with torch.no_grad():
        for p in lm.parameters():
            p.add_(1.0)
    for a, b in zip(model.backbone.parameters(), lm.parameters()):
        assert not torch.equal(a, b)


def test_context_overflow():
    from mapo.errors import ContextOverflowError

    model = make_model(context=8)
    with pytest.raises(ContextOverflowError):
        score(model, "w1 w2 w3 w4 w5", "w6 w7 w8 w9")


# --- ranking loss anchors ------------------------------------------------------------


def test_zero_margin_is_log2():
    loss = ranking_loss_from_margins(torch.zeros(1, dtype=torch.float64), k=2)
    assert abs(float(loss) - math.log(2)) <= 1e-9


def test_margin_one_anchor():
    loss = ranking_loss_from_margins(torch.ones(1, dtype=torch.float64), k=2)
    expected = -math.log(1.0 / (1.0 + math.exp(-1.0)))
    assert abs(float(loss) - expected) <= 1e-9
    assert math.isclose(expected, 0.31326168751822286)


def test_loss_strictly_decreasing_in_margin():
    margins = torch.linspace(-4, 6, 50, dtype=torch.float64)
    losses = [float(ranking_loss_from_margins(m.reshape(1), k=2)) for m in margins]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_large_margin_loss_vanishes():
    assert float(ranking_loss_from_margins(torch.tensor([40.0], dtype=torch.float64), k=2)) < 1e-15


def test_k_prefactor():
    m = torch.tensor([0.0], dtype=torch.float64)
    assert math.isclose(
        float(ranking_loss_from_margins(m, k=4)), math.log(2) / 6, rel_tol=1e-12
    )
    with pytest.raises(ValueError):
        ranking_loss_from_margins(m, k=1)


def test_model_level_zero_head_gives_log2():
    model = make_model()
    batch = batch_of([RankingPair("w1", "w2", "w3"), RankingPair("w4", "w5", "w6")])
    assert abs(float(pairwise_ranking_loss(model, batch).detach()) - math.log(2)) <= 1e-9


def test_ranking_pair_rejects_identical():
    with pytest.raises(ValueError):
        batch_of([RankingPair("x", "same", "same")])


# --- bias invariance --------------------------------------------------------------------


def test_head_bias_shift_invariance():
    model = make_model(seed=3)
    with torch.no_grad():
        torch.nn.init.normal_(model.scalar_head.weight, std=0.5,
                              generator=torch.Generator().manual_seed(2))
    batch = batch_of([RankingPair("w1", "w2 marker", "w2"), RankingPair("w3", "w4", "w5 w6")])
    loss_before = float(pairwise_ranking_loss(model, batch).detach())
    acc_before = pairwise_accuracy(model, batch)
    scores_before = [score(model, p.x, p.y_w) for p in batch.items]
    with torch.no_grad():
        model.scalar_head.bias += 3.7
    assert float(pairwise_ranking_loss(model, batch).detach()) == loss_before
    assert pairwise_accuracy(model, batch) == acc_before
    for s, p in zip(scores_before, batch.items):
        assert math.isclose(score(model, p.x, p.y_w), s + 3.7, rel_tol=1e-9)


# --- gradients -------------------------------------------------------------------------


def test_ranking_loss_gradient_matches_finite_differences():
    model = make_model(seed=6)
    with torch.no_grad():
        torch.nn.init.normal_(model.scalar_head.weight, std=0.3,
                              generator=torch.Generator().manual_seed(3))
    batch = batch_of([RankingPair("w1 w2", "w3 marker", "w3"), RankingPair("w4", "w5", "w6 w7")])
    finite_difference_check(
        lambda: pairwise_ranking_loss(model, batch), model, n_coords=20, seed=4
    )


# --- pairwise accuracy --------------------------------------------------------------------


def test_accuracy_constant_model_is_zero():
    model = make_model()
    batch = batch_of([RankingPair("w1", "w2", "w3")])
    assert pairwise_accuracy(model, batch) == 0.0


def test_accuracy_matches_enumeration():
    model = make_model(seed=8)
    with torch.no_grad():
        torch.nn.init.normal_(model.scalar_head.weight, std=0.5,
                              generator=torch.Generator().manual_seed(5))
    items = [RankingPair(f"w{i % 9}", f"w{(i + 1) % 9} marker", f"w{(i + 2) % 9}") for i in range(7)]
    batch = batch_of(items)
    manual = sum(
        1 for p in items if score(model, p.x, p.y_w) > score(model, p.x, p.y_l)
    ) / len(items)
    assert pairwise_accuracy(model, batch) == manual


# --- training ---------------------------------------------------------------------------


def planted_pairs(n, seed, flip=False):
    """Winner contains strictly more 'marker' tokens (the hidden feature)."""
    rng = random.Random(seed)
    fillers = [f"w{i}" for i in range(10)]

    def make_y(markers, fill):
        toks = ["marker"] * markers + [rng.choice(fillers) for _ in range(fill)]
        rng.shuffle(toks)
        return " ".join(toks)

    items = []
    for _ in range(n):
        x = " ".join(rng.choice(fillers) for _ in range(3))
        hi = rng.randint(1, 5)
        lo = rng.randint(0, hi - 1)
        y_w, y_l = make_y(hi, 7 - hi), make_y(lo, 7 - lo)
        if flip:
            y_w, y_l = y_l, y_w
        items.append(RankingPair(x=x, y_w=y_w, y_l=y_l))
    return items


def test_training_smoke_reaches_high_accuracy():
    items = planted_pairs(260, seed=0)
    holdout = batch_of(items[:60])
    train_items = items[60:]
    batches = [batch_of(train_items[i : i + 16]) for i in range(0, len(train_items), 16)]
    model = make_model(seed=1, d_model=32)
    model, acc = train_reward(model, batches, epochs=10, learning_rate=1e-3, seed=2, holdout=holdout)
    assert max(acc) >= 0.95
    assert acc[-1] >= 0.9


def test_zero_learning_rate_accuracy_unchanged():
    items = planted_pairs(48, seed=3)
    batches = [batch_of(items[i : i + 16]) for i in range(0, 48, 16)]
    model = make_model(seed=1)
    before = pairwise_accuracy(model, batch_of(items))
    model, acc = train_reward(model, batches, epochs=2, learning_rate=0.0, weight_decay=0.0, seed=2)
    assert acc[-1] == before


def test_label_flip_inverts_order():
    flipped = planted_pairs(160, seed=5, flip=True)
    true_labels = batch_of(planted_pairs(60, seed=6))
    batches = [batch_of(flipped[i : i + 16]) for i in range(0, 160, 16)]
    model = make_model(seed=2, d_model=32)
    model, _ = train_reward(model, batches, epochs=8, learning_rate=1e-3, seed=3)
    assert pairwise_accuracy(model, true_labels) <= 0.5


def test_non_finite_loss_aborts():
    model = make_model()
    with torch.no_grad():
        model.scalar_head.weight.fill_(float("nan"))
    batch = batch_of([RankingPair("w1", "w2", "w3")])
    with pytest.raises(ValueError):
        train_reward(model, [batch], epochs=1)


# --- calibration -----------------------------------------------------------------------


def test_calibration_anchors_means_preserves_accuracy():
    items = planted_pairs(120, seed=7)
    batches = [batch_of(items[i : i + 16]) for i in range(0, 120, 16)]
    model = make_model(seed=4, d_model=32)
    model, _ = train_reward(model, batches, epochs=6, learning_rate=1e-3, seed=8)
    full = batch_of(items)
    acc_before = pairwise_accuracy(model, full)
    calibrate_scores(model, full)
    losers = [score(model, p.x, p.y_l) for p in items]
    winners = [score(model, p.x, p.y_w) for p in items]
    assert abs(sum(losers) / len(losers)) < 1e-6
    assert abs(sum(winners) / len(winners) - 1.0) < 1e-6
    assert pairwise_accuracy(model, full) == acc_before


# --- jsonl interface -----------------------------------------------------------------------


def test_ranking_pairs_roundtrip(tmp_path):
    batches = [
        batch_of([RankingPair("x1", "good", "bad"), RankingPair("x1", "best", "good")], k=3),
        batch_of([RankingPair("x2", "w", "l")], k=2),
    ]
    path = tmp_path / "pairs.jsonl"
    assert write_ranking_pairs(path, batches) == 3
    loaded = load_ranking_pairs(path)
    assert sorted((b.k, b.items) for b in loaded) == sorted((b.k, b.items) for b in batches)
    first = path.read_text().splitlines()[0]
    import json

    assert set(json.loads(first)) == {"x", "y_w", "y_l", "k"}
