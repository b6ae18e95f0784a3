import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hintfusion.hints import (HintProjections, HintSet, VisualTokens, color_separation, downsample_grid,
                              pca_color_map, pool_tokens, project_hints, question_hint_tokens,
                              select_semantic_queries, similarity_hint_tokens, similarity_matrix, top_k_indices)
from hintfusion.modules import Linear
from hintfusion.numerics import Tensor


def window_mean_oracle(fm, w):
    g = fm.shape[0]
    t = g // w
    out = np.zeros((t * t, fm.shape[2]))
    for i in range(t):
        for j in range(t):
            acc = np.zeros(fm.shape[2])
            for a in range(w):
                for b in range(w):
                    acc += fm[i * w + a, j * w + b]
            out[i * t + j] = acc / (w * w)
    return out


def test_downsample_identity_and_constant():
    fm = np.random.default_rng(0).standard_normal((24, 24, 3))
    assert np.array_equal(downsample_grid(fm), fm.reshape(576, 3))
    const = np.full((48, 48, 2), 1.5)
    assert np.all(downsample_grid(const) == 1.5)


def test_downsample_matches_window_oracle():
    fm = np.random.default_rng(1).standard_normal((48, 48, 4))
    assert np.max(np.abs(downsample_grid(fm) - window_mean_oracle(fm, 2))) < 1e-12


@pytest.mark.parametrize("g", [36, 30, 12])
def test_downsample_rejects_fractional_windows(g):
    with pytest.raises(ValueError):
        downsample_grid(np.zeros((g, g, 1)))


def test_pool_tokens_round_trip():
    t = np.random.default_rng(2).standard_normal((576, 3))
    pooled = pool_tokens(t, (24, 24), (6, 6))
    assert pooled.shape == (36, 3)
    assert np.allclose(pooled[0], t.reshape(24, 24, 3)[:4, :4].mean(axis=(0, 1)), atol=1e-14)


def test_visual_tokens_grid_check():
    VisualTokens(Tensor(np.zeros((576, 2))))
    with pytest.raises(ValueError):
        VisualTokens(Tensor(np.zeros((10, 2))), (3, 3))


def test_similarity_orthogonal_is_identity():
    t = np.eye(4) * np.array([[2.0], [0.5], [3.0], [1.0]])
    assert np.allclose(similarity_matrix(t), np.eye(4), atol=1e-15)
    proj = Linear(4, 3, np.random.default_rng(3))
    hint = similarity_hint_tokens(t, proj)
    assert hint.source == "similarity-matrix"
    assert np.allclose(hint.tokens.data, proj.weight.data + proj.bias.data, atol=1e-15)


def test_similarity_duplicates_and_oracle():
    rng = np.random.default_rng(4)
    t = rng.standard_normal((6, 5))
    t[4] = t[1]
    oracle = np.array([[a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for b in t] for a in t])
    assert np.max(np.abs(similarity_matrix(t) - oracle)) < 1e-12
    hint = similarity_hint_tokens(t, Linear(6, 4, rng))
    assert np.array_equal(hint.tokens.data[1], hint.tokens.data[4])


def test_similarity_errors():
    with pytest.raises(ValueError):
        similarity_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        similarity_hint_tokens(np.ones((5, 3)), Linear(4, 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_similarity_scale_invariant(seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((7, 4))
    scaled = t * rng.uniform(0.1, 10.0, size=(7, 1))
    assert np.max(np.abs(similarity_matrix(t) - similarity_matrix(scaled))) < 1e-12


def test_semantic_selection_basics():
    rng = np.random.default_rng(5)
    q = rng.standard_normal((6, 3))
    conf = np.array([0.1, 0.5, 0.7, 0.2, 0.9, 0.7])
    labels = np.array([0, 1, 2, 0, 1, 2])
    table = rng.standard_normal((3, 3))
    full = select_semantic_queries(q, conf, labels, 6, table)
    assert list(full.indices) == [4, 2, 5, 1, 3, 0]
    assert np.all(np.diff(full.confidences) <= 0)
    assert np.allclose(full.tokens.data, q[full.indices] + table[labels[full.indices]], atol=1e-15)
    tie = select_semantic_queries(q, conf, labels, 2, table)
    assert list(tie.indices) == [4, 2]
    empty = select_semantic_queries(q, conf, labels, 0, table)
    assert empty.tokens.shape == (0, 3)
    with pytest.raises(ValueError):
        select_semantic_queries(q, conf, labels, 7, table)
    with pytest.raises(ValueError):
        select_semantic_queries(q, conf, np.array([0, 1, 2, 0, 1, 3]), 2, table)


def test_semantic_tie_break_documented_case():
    conf = np.zeros(8)
    conf[2] = conf[5] = 0.7
    assert list(top_k_indices(conf, 1)) == [2]


@pytest.mark.parametrize("k", [8, 16, 32, 64])
def test_semantic_sweep_values_accepted(k):
    rng = np.random.default_rng(k)
    hint = select_semantic_queries(rng.standard_normal((100, 4)), rng.uniform(size=100),
                                   rng.integers(0, 5, 100), k, rng.standard_normal((5, 4)))
    assert hint.tokens.shape == (k, 4)


def test_semantic_selection_matches_sort_oracle_1000_instances():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        k = int(rng.integers(0, n + 1))
        conf = rng.integers(0, 4, n) / 4.0  # coarse values force ties
        labels = rng.integers(0, 3, n)
        q = rng.standard_normal((n, 2))
        hint = select_semantic_queries(q, conf, labels, k, np.zeros((3, 2)))
        oracle = sorted(range(n), key=lambda i: (-conf[i], i))[:k]
        assert list(hint.indices) == oracle
        got = sorted((tuple(r), int(lab)) for r, lab in zip(hint.tokens.data, hint.labels))
        want = sorted((tuple(q[i]), int(labels[i])) for i in oracle)
        assert got == want


def test_question_gather():
    table = np.arange(20.0).reshape(5, 4)
    h = question_hint_tokens([3, 1, 3], table)
    assert np.array_equal(h.tokens.data, table[[3, 1, 3]])
    assert question_hint_tokens([2], table).tokens.shape == (1, 4)
    assert question_hint_tokens([], table).tokens.shape == (0, 4)
    with pytest.raises(ValueError):
        question_hint_tokens([5], table)


def test_question_gather_value_semantics():
    table = np.arange(12.0).reshape(3, 4)
    h = question_hint_tokens([0, 2], table)
    table[:] = -1
    assert np.array_equal(h.tokens.data, np.array([[0, 1, 2, 3], [8, 9, 10, 11.0]]))


def test_projections_present_iff_dims_differ():
    p = HintProjections(8, 8, 4, 6, np.random.default_rng(7))
    assert p.affinity is None and p.semantic is not None and p.question is not None
    same = HintProjections(8, 8, 8, 8)
    hs = HintSet(Tensor(np.ones((2, 8))), Tensor(np.ones((1, 8))), Tensor(np.ones((3, 8))))
    out = project_hints(hs, same)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(
        (out.affinity, out.semantic, out.question), (hs.affinity, hs.semantic, hs.question)))


def test_projection_zero_and_oracle():
    rng = np.random.default_rng(8)
    p = HintProjections(6, 6, 4, 5, rng)
    sem, q = rng.standard_normal((3, 4)), rng.standard_normal((2, 5))
    out = project_hints(HintSet(Tensor(np.zeros((1, 6))), Tensor(sem), Tensor(q)), p)
    assert out.semantic.shape == (3, 6) and out.question.shape == (2, 6)
    assert np.allclose(out.question.data, q @ p.question.weight.data + p.question.bias.data, atol=1e-14)
    zero = HintProjections(6, 6, 4, 5)  # no rng: zero weights
    out0 = project_hints(HintSet(Tensor(np.zeros((1, 6))), Tensor(sem), Tensor(q)), zero)
    assert np.all(out0.semantic.data == 0)


def test_projection_errors():
    p = HintProjections(6, 6, 4, 5)
    with pytest.raises(ValueError):
        project_hints(HintSet(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 4))), Tensor(np.ones((1, 5)))), p)
    with pytest.raises(ValueError):
        project_hints(HintSet(Tensor(np.ones((1, 6))), Tensor(np.ones((1, 3))), Tensor(np.ones((1, 5)))), p)


def test_color_map_clusters():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((10, 8)) * 0.05 + 3.0
    b = rng.standard_normal((10, 8)) * 0.05 - 3.0
    rgb = pca_color_map(np.concatenate([a, b]))
    within, cross = color_separation(rgb, np.repeat([0, 1], 10))
    assert within < cross


def test_color_map_degenerate_and_bounds():
    assert np.all(pca_color_map(np.ones((5, 4))) == 0.5)
    rgb = pca_color_map(np.random.default_rng(10).standard_normal((30, 6)) * 100)
    assert rgb.min() >= 0 and rgb.max() <= 1
    with pytest.raises(ValueError):
        pca_color_map(np.ones((2, 4)))


def test_color_separation_ignores_background():
    rgb = np.array([[0, 0, 0], [0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5]], dtype=float)
    within, cross = color_separation(rgb, np.array([0, 0, 1, -1]))
    assert within == 0.0 and np.isclose(cross, np.sqrt(3))
    with pytest.raises(ValueError):
        color_separation(rgb, np.array([0, 0, -1, -1]))
