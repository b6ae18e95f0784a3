import math
from collections import Counter

import numpy as np
import pytest

from hintfusion.accounting import DimConfig
from hintfusion.pipeline import (FeatureStore, ToyModelConfig, TrainConfig, ablate, bleu4, build_model, evaluate,
                                 expand_axes, forward, hint_subsets, make_batch, question_prior_accuracy,
                                 score_predictions, train)
from hintfusion.synthetic import (ANSWER_ID, ANSWERS, KINDS, DatasetConfig, World, WorldConfig, generate_dataset,
                                  render_answer)
from oracles import fuse_oracle

SMALL_WORLD = World(WorldConfig(d_base=24, d_aff=24, d_sem=12, slots=6))
SMALL_DIMS = DimConfig(d=24, d_aff=24, d_sem=12, d_text=6, L=4, N=4, M=3, K=8, heads=2)


@pytest.fixture(scope="module")
def small_store():
    recs = generate_dataset(DatasetConfig(master_seed=5, n_train=48, n_test=24))
    return FeatureStore(recs, SMALL_WORLD, grid=(2, 2), num_queries=8)


@pytest.fixture(scope="module")
def desk_store():
    recs = generate_dataset(DatasetConfig(master_seed=9, n_train=64, n_test=32))
    return FeatureStore(recs)


def gelu_np(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def forward_oracle(model, batch):
    cfg, proj = model.cfg, model.proj
    table = model.question_table().data
    out = []
    for b in range(len(batch.answers)):
        q_tok = table[batch.question_ids[b]]
        sem = batch.sem_queries[b] + model.label_embed.data[batch.sem_labels[b]]
        h_s = sem @ proj.semantic.weight.data + proj.semantic.bias.data
        h_q = q_tok @ proj.question.weight.data + proj.question.bias.data
        if "Q" not in cfg.hints_enabled:
            h_q = h_q[:0]
        h_a = batch.affinity[b]
        fused = fuse_oracle(cfg.fusion, batch.P[b], h_a, h_s, h_q, model.fusion.attn, cfg.stage_self_kv)
        pooled = np.concatenate([fused.mean(0), q_tok.mean(0)])
        hidden = gelu_np(pooled @ model.fc1.weight.data + model.fc1.bias.data)
        out.append(hidden @ model.fc2.weight.data + model.fc2.bias.data)
    return np.array(out)


@pytest.mark.parametrize("strategy", ["concat", "self-cross", "joint", "sequential", "parallel"])
@pytest.mark.parametrize("hints", [("A", "S", "Q"), ("S",), ()])
def test_forward_matches_oracle(small_store, strategy, hints):
    cfg = ToyModelConfig(dims=SMALL_DIMS, fusion=strategy, hints_enabled=hints, semantic_k=3, adapter_width=5)
    model = build_model(cfg, small_store, seed=3)
    if strategy not in ("joint", "concat") and not hints:
        with pytest.raises(ValueError):
            forward(model, make_batch(small_store, cfg, np.arange(2)))
        return
    rng = np.random.default_rng(4)
    for p in model.fusion.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.3
    batch = make_batch(small_store, cfg, np.arange(5))
    assert np.max(np.abs(forward(model, batch).data - forward_oracle(model, batch))) < 1e-10


def test_zero_init_fusion_returns_tokens(small_store):
    cfg = ToyModelConfig(dims=SMALL_DIMS, semantic_k=3, adapter_width=5)
    model = build_model(cfg, small_store, seed=0)
    batch = make_batch(small_store, cfg, np.arange(3))
    from hintfusion.fusion import fuse
    from hintfusion.numerics import Tensor
    z = Tensor(np.zeros((3, 0, 24)))
    fused = fuse(Tensor(batch.P), Tensor(batch.affinity), z, z, model.fusion)
    assert np.array_equal(fused.data, batch.P)


def test_zero_parameters_give_uniform_logits(small_store):
    cfg = ToyModelConfig(dims=SMALL_DIMS, semantic_k=3, adapter_width=5)
    model = build_model(cfg, small_store, seed=0)
    for p in model.parameters():
        p.data[...] = 0.0
    logits = forward(model, make_batch(small_store, cfg, np.arange(4))).data
    probs = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    assert np.allclose(probs, 1.0 / len(ANSWERS), atol=1e-15)


def test_empty_hints_and_batch_shapes(small_store):
    cfg = ToyModelConfig(dims=SMALL_DIMS, hints_enabled=(), semantic_k=3, adapter_width=5)
    batch = make_batch(small_store, cfg, np.arange(4))
    assert batch.affinity.shape == (4, 0, 24) and batch.sem_queries.shape == (4, 0, 12)
    logits = forward(build_model(cfg, small_store, 0), batch)
    assert logits.shape == (4, len(ANSWERS)) and np.all(np.isfinite(logits.data))
    with pytest.raises(ValueError):
        make_batch(small_store, ToyModelConfig(dims=SMALL_DIMS, semantic_k=9), np.arange(2))


def test_similarity_source_width(desk_store):
    cfg = ToyModelConfig(affinity_source="similarity-matrix")
    batch = make_batch(desk_store, cfg, np.arange(2))
    assert batch.affinity.shape == (2, 36, 36)
    assert np.allclose(batch.affinity, np.swapaxes(batch.affinity, 1, 2), atol=1e-12)
    model = build_model(cfg, desk_store, 0)
    assert model.proj.affinity is not None
    assert forward(model, batch).shape == (2, len(ANSWERS))
    with pytest.raises(KeyError):
        make_batch(desk_store, ToyModelConfig(affinity_source="student"), np.arange(2))


def test_config_validation():
    with pytest.raises(ValueError):
        ToyModelConfig(affinity_source="depth")
    with pytest.raises(ValueError):
        ToyModelConfig(question_source="clip")
    with pytest.raises(ValueError):
        ToyModelConfig(semantic_k=-1)
    with pytest.raises(ValueError):
        TrainConfig(warmup_ratio=1.0)
    assert ToyModelConfig(hints_enabled=("Q", "A")).hints_enabled == ("A", "Q")


def test_bleu4_hand_example():
    cand = "the cat sat on the mat".split()
    ref = "the cat sat on a mat".split()
    # clipped precisions 5/6, 3/5, 2/4, 1/3 and equal lengths
    assert bleu4(cand, [ref]) == pytest.approx((5 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** 0.25, rel=1e-12)


def test_bleu4_identity_brevity_and_errors():
    s = "a b c d e".split()
    assert bleu4(s, [s]) == pytest.approx(1.0)
    # short candidate: all n-gram orders are 1 after smoothing, only the brevity penalty remains
    assert bleu4(["the", "cat"], [["the", "cat", "sat", "on"]]) == pytest.approx(math.exp(-1))
    assert bleu4([], [s]) == 0.0
    assert bleu4(["x"], [["y"]]) < 1.0
    with pytest.raises(ValueError):
        bleu4(s, [])


def test_score_perfect_and_constant(desk_store):
    recs = desk_store.records
    perfect = score_predictions(recs, desk_store.answers)
    assert perfect.accuracy == 1.0 and perfect.bleu4 == pytest.approx(1.0)
    assert set(perfect.per_kind) <= set(KINDS) and all(v == 1.0 for v in perfect.per_kind.values())
    yes = np.full(len(recs), ANSWER_ID["yes"])
    const = score_predictions(recs, yes)
    assert const.accuracy == pytest.approx(np.mean(desk_store.answers == ANSWER_ID["yes"]))
    assert const.per_kind.get("count", 0.0) == 0.0


def test_score_twenty_item_tally(desk_store):
    recs = desk_store.records[:20]
    rng = np.random.default_rng(0)
    gold = desk_store.answers[:20]
    preds = np.where(rng.uniform(size=20) < 0.5, gold, (gold + 1) % len(ANSWERS))
    m = score_predictions(recs, preds)
    tally = Counter()
    hits = Counter()
    for r, p in zip(recs, preds):
        tally[r.qa.kind] += 1
        hits[r.qa.kind] += int(p == r.qa.answer)
    assert m.n == 20 and m.accuracy == sum(hits.values()) / 20
    assert m.per_kind == {k: hits[k] / tally[k] for k in KINDS if tally[k]}
    expected_bleu = np.mean([bleu4(render_answer(r.qa, int(p)), [render_answer(r.qa, r.qa.answer)])
                             for r, p in zip(recs, preds)])
    assert m.bleu4 == pytest.approx(expected_bleu)


def test_evaluate_rejects_empty(desk_store):
    model = build_model(ToyModelConfig(), desk_store, 0)
    with pytest.raises(ValueError):
        evaluate(model, desk_store, np.array([], dtype=int))
    with pytest.raises(ValueError):
        score_predictions([], np.array([]))


def test_question_prior_matches_brute_force(desk_store):
    tr, te = desk_store.split("train"), desk_store.split("test")
    got = question_prior_accuracy(desk_store)
    hits = []
    for i in te:
        same = [desk_store.answers[j] for j in tr if np.array_equal(desk_store.question_ids[j], desk_store.question_ids[i])]
        pool = same or list(desk_store.answers[tr])
        c = Counter(int(a) for a in pool)
        guess = sorted(c, key=lambda a: (-c[a], a))[0]
        hits.append(guess == desk_store.answers[i])
    assert got["overall"] == pytest.approx(np.mean(hits))


def test_train_determinism_and_lr_zero(desk_store):
    cfg = ToyModelConfig()
    run = TrainConfig(lr=1e-3, epochs=2, batch_size=32, seed=1)
    a, b = train(cfg, desk_store, run), train(cfg, desk_store, run)
    assert [h.loss for h in a.history] == [h.loss for h in b.history]
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.model.parameters(), b.model.parameters()))
    frozen = train(cfg, desk_store, TrainConfig(lr=0.0, epochs=3, batch_size=64, seed=1))
    losses = [h.loss for h in frozen.history]
    assert max(losses) - min(losses) < 1e-12
    assert [h.step for h in frozen.history] == [1, 2, 3]


def test_expand_axes_and_ablate_structure(desk_store):
    base = ToyModelConfig()
    assert len(expand_axes(base, {"hints": hint_subsets()})) == 8
    assert hint_subsets()[0] == () and hint_subsets()[-1] == ("A", "S", "Q")
    with pytest.raises(ValueError):
        expand_axes(base, {"depth": [1]})
    run = TrainConfig(lr=1e-3, epochs=1, batch_size=64)
    rows = ablate(base, desk_store, {"hints": hint_subsets()}, run)
    assert [r["rank"] for r in rows] == list(range(1, 9))
    assert sorted(r["hints"] for r in rows) == sorted(["-", "A", "S", "Q", "AS", "AQ", "SQ", "ASQ"])
    assert all(a["accuracy"] >= b["accuracy"] for a, b in zip(rows, rows[1:]))
    single = ablate(base, desk_store, {"semantic_k": [8]}, run)
    assert len(single) == 1 and single[0]["semantic_k"] == 8
