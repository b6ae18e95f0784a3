import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hintfusion.attention import EmptyKeyError, multi_head_attention
from hintfusion.fusion import (ATTENTION_LAYERS, FusionParams, FusionStrategy, fuse, fused_kv_assembly, wiring)
from hintfusion.numerics import gradient_check
from oracles import fuse_oracle

ATTN = [s for s in FusionStrategy if s is not FusionStrategy.CONCAT]


def random_fusion(strategy, d=8, heads=2, seed=0, scale=0.4, self_kv=True):
    fp = FusionParams(strategy, d, heads, seed=seed, zero_output=False, stage_self_kv=self_kv)
    rng = np.random.default_rng(seed + 17)
    for _, p in fp.named_parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale
    return fp


def random_inputs(rng, d=8, L=3, N=2, M=2, K=2):
    return tuple(rng.standard_normal((n, d)) for n in (L, N, M, K))


def test_parse_round_trip():
    for s in FusionStrategy:
        assert FusionStrategy.parse(str(s)) is s
        assert FusionStrategy.parse(s.name.lower()) is s
    with pytest.raises(ValueError):
        FusionStrategy.parse("cross")


def test_layer_counts():
    for s, n in ATTENTION_LAYERS.items():
        assert len(FusionParams(s, 8).attn) == n


def test_concat_length_full_scale_shapes():
    P, A, S, Q = (np.zeros((n, 4)) for n in (576, 576, 32, 20))
    out = fuse(P, A, S, Q, FusionParams("concat", 4))
    assert out.shape == (1204, 4)


@pytest.mark.parametrize("strategy", ATTN)
def test_residual_floor_zero_output(strategy):
    rng = np.random.default_rng(0)
    P, A, S, Q = random_inputs(rng)
    out = fuse(P, A, S, Q, FusionParams(strategy, 8, 2, seed=3, zero_output=True))
    assert np.array_equal(out.data, P)


@pytest.mark.parametrize("strategy", list(FusionStrategy))
@pytest.mark.parametrize("self_kv", [True, False])
def test_composition_oracle(strategy, self_kv):
    rng = np.random.default_rng(1)
    P, A, S, Q = random_inputs(rng)
    fp = random_fusion(strategy, seed=2, self_kv=self_kv)
    ref = fuse_oracle(strategy.value, P, A, S, Q, fp.attn, self_kv)
    assert np.max(np.abs(fuse(P, A, S, Q, fp).data - ref)) < 1e-10


def test_joint_matches_explicit_formula():
    rng = np.random.default_rng(4)
    P, A, S, Q = random_inputs(rng)
    fp = random_fusion("joint", seed=5)
    kv = np.concatenate([P, A, S, Q])
    expected = P + multi_head_attention(P, kv, fp.attn[0]).data
    assert np.max(np.abs(fuse(P, A, S, Q, fp).data - expected)) < 1e-12


def test_joint_survives_empty_hints():
    P = np.random.default_rng(5).standard_normal((3, 8))
    empty = np.zeros((0, 8))
    fp = random_fusion("joint", seed=6)
    out = fuse(P, empty, empty, empty, fp)
    assert np.max(np.abs(out.data - (P + multi_head_attention(P, P, fp.attn[0]).data))) < 1e-12


@pytest.mark.parametrize("strategy", ["self-cross", "sequential", "parallel"])
def test_all_empty_hints_rejected(strategy):
    P = np.ones((3, 8))
    empty = np.zeros((0, 8))
    with pytest.raises(EmptyKeyError):
        fuse(P, empty, empty, empty, random_fusion(strategy))


@pytest.mark.parametrize("strategy", ["sequential", "parallel"])
def test_empty_single_hint_skips_its_stage(strategy):
    rng = np.random.default_rng(7)
    P, A, S, _ = random_inputs(rng)
    Q = np.zeros((0, 8))
    fp = random_fusion(strategy, seed=8)
    ref = fuse_oracle(strategy, P, A, S, Q, fp.attn)
    assert np.max(np.abs(fuse(P, A, S, Q, fp).data - ref)) < 1e-10


def test_kv_assembly_joint_and_parallel():
    rng = np.random.default_rng(9)
    P, A, S, Q = random_inputs(rng)
    pairs = fused_kv_assembly(P, A, S, Q, "joint")
    assert len(pairs) == 1
    assert np.array_equal(pairs[0][1].data, np.concatenate([P, A, S, Q]))
    par = fused_kv_assembly(P, A, S, Q, "parallel")
    assert len(par) == 3 and all(np.array_equal(q.data, P) for q, _ in par)
    lit = fused_kv_assembly(P, A, S, Q, "parallel", FusionParams("parallel", 8, 2, stage_self_kv=False))
    assert [kv.shape[0] for _, kv in lit] == [2, 2, 2]


def test_kv_assembly_sequential_chains():
    rng = np.random.default_rng(10)
    P, A, S, Q = random_inputs(rng)
    fp = random_fusion("sequential", seed=11)
    pairs = fused_kv_assembly(P, A, S, Q, "sequential", fp)
    assert len(pairs) == 3
    out1 = multi_head_attention(pairs[0][0], pairs[0][1], fp.attn[0]).data
    assert np.max(np.abs(pairs[1][0].data - out1)) < 1e-14
    with pytest.raises(RuntimeError):
        fused_kv_assembly(P, A, S, Q, "sequential")


def test_wiring_matches_layer_counts():
    for s in FusionStrategy:
        assert len(wiring(s)) == ATTENTION_LAYERS[s]


def test_width_mismatch():
    with pytest.raises(ValueError):
        fuse(np.ones((2, 8)), np.ones((2, 4)), np.ones((1, 8)), np.ones((1, 8)), FusionParams("joint", 8))


# ---- property suite (>= 200 randomized cases each)

dims = st.tuples(st.integers(1, 4), st.integers(0, 4), st.integers(0, 4), st.integers(0, 4))


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(ATTN), dims, st.integers(0, 10**6))
def test_prop_residual_floor(strategy, shape, seed):
    L, N, M, K = shape
    if strategy is not FusionStrategy.JOINT and N + M + K == 0:
        N = 1
    rng = np.random.default_rng(seed)
    P, A, S, Q = random_inputs(rng, 8, L, N, M, K)
    fp = FusionParams(strategy, 8, 2, seed=seed % 997, zero_output=True)
    assert np.array_equal(fuse(P, A, S, Q, fp).data, P)


@settings(max_examples=200, deadline=None)
@given(dims, st.integers(1, 3), st.integers(0, 10**6))
def test_prop_concat_length(shape, batch, seed):
    L, N, M, K = shape
    rng = np.random.default_rng(seed)
    parts = [rng.standard_normal((batch, n, 4)) for n in (L, N, M, K)]
    out = fuse(*parts, FusionParams("concat", 4))
    assert out.shape == (batch, L + N + M + K, 4)
    assert np.array_equal(out.data[:, :L], parts[0])


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(ATTN), dims, st.sampled_from(["A", "S", "Q"]), st.integers(0, 10**6))
def test_prop_kv_permutation(strategy, shape, which, seed):
    L, N, M, K = shape
    N, M, K = max(N, 1), max(M, 1), max(K, 1)
    rng = np.random.default_rng(seed)
    P, A, S, Q = random_inputs(rng, 8, L, N, M, K)
    fp = random_fusion(strategy, seed=seed % 991)
    base = fuse(P, A, S, Q, fp).data
    h = {"A": A, "S": S, "Q": Q}
    h[which] = h[which][rng.permutation(len(h[which]))]
    assert np.max(np.abs(fuse(P, h["A"], h["S"], h["Q"], fp).data - base)) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_prop_sequential_parallel_distinct(seed):
    seq = random_fusion("sequential", seed=seed % 983)
    par = FusionParams("parallel", 8, 2)
    par.load_state_dict(seq.state_dict())
    P, A, S, Q = random_inputs(np.random.default_rng(seed))
    diff = np.max(np.abs(fuse(P, A, S, Q, seq).data - fuse(P, A, S, Q, par).data))
    assert diff > 1e-6


@pytest.mark.parametrize("strategy", list(FusionStrategy))
def test_gradients_over_seeds(strategy):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        P, A, S, Q = random_inputs(rng, 8, 2, 2, 1, 1)
        fp = random_fusion(strategy, seed=seed)
        out_rows = 6 if strategy is FusionStrategy.CONCAT else 2
        R = rng.standard_normal((out_rows, 8))
        params = fp.parameters()
        if not params:
            continue
        errs = gradient_check(lambda: (fuse(P, A, S, Q, fp) * R).sum(), params)
        assert max(errs.values()) < 1e-4, (strategy, seed, errs)
