import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hintfusion.attention import EmptyKeyError, MhaParams, multi_head_attention, self_attention
from hintfusion.numerics import ShapeError, gradient_check
from oracles import attention_of


def random_params(d, h, seed, scale=0.5):
    p = MhaParams(d, h, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for _, prm in p.named_parameters():
        prm.data[...] = rng.standard_normal(prm.shape) * scale
    return p


def test_single_key_weight_is_one():
    p = random_params(8, 2, 0)
    rng = np.random.default_rng(1)
    q, kv = rng.standard_normal((4, 8)), rng.standard_normal((1, 8))
    out = multi_head_attention(q, kv, p).data
    row = (kv @ p.W_v.data + p.b_v.data) @ p.W_o.data + p.b_o.data
    assert np.allclose(out, np.repeat(row, 4, axis=0), atol=1e-14, rtol=0)


def test_identity_params_single_head():
    p = MhaParams(6, 1, seed=0)
    for name, prm in p.named_parameters():
        prm.data[...] = np.eye(6) if name.startswith("W") else 0.0
    kv = np.random.default_rng(2).standard_normal((1, 6))
    out = multi_head_attention(np.random.default_rng(3).standard_normal((5, 6)), kv, p).data
    assert np.array_equal(out, np.repeat(kv, 5, axis=0))


def test_matches_loop_oracle():
    p = random_params(8, 2, 4)
    rng = np.random.default_rng(5)
    q, kv = rng.standard_normal((3, 8)), rng.standard_normal((5, 8))
    assert np.max(np.abs(multi_head_attention(q, kv, p).data - attention_of(p)(q, kv))) < 1e-10


def test_self_attention_is_definitional():
    p = random_params(8, 4, 6)
    x = np.random.default_rng(7).standard_normal((5, 8))
    assert np.array_equal(self_attention(x, p).data, multi_head_attention(x, x, p).data)
    assert np.max(np.abs(self_attention(x, p).data - attention_of(p)(x, x))) < 1e-10


def test_self_attention_single_token():
    p = random_params(8, 2, 8)
    x = np.random.default_rng(9).standard_normal((1, 8))
    expected = (x @ p.W_v.data + p.b_v.data) @ p.W_o.data + p.b_o.data
    assert np.allclose(self_attention(x, p).data, expected, atol=1e-14, rtol=0)


def test_empty_kv_rejected():
    p = MhaParams(8, 2)
    with pytest.raises(EmptyKeyError):
        multi_head_attention(np.ones((2, 8)), np.zeros((0, 8)), p)


def test_bad_shapes():
    p = MhaParams(8, 2)
    with pytest.raises(ShapeError):
        multi_head_attention(np.ones((2, 4)), np.ones((2, 8)), p)
    with pytest.raises(ShapeError):
        multi_head_attention(np.ones((0, 8)), np.ones((2, 8)), p)
    with pytest.raises(ValueError):
        MhaParams(10, 3)


def test_zero_output_projection():
    p = MhaParams(8, 2, seed=3, zero_output=True)
    out = multi_head_attention(np.ones((3, 8)), np.ones((2, 8)), p)
    assert np.array_equal(out.data, np.zeros((3, 8)))


def test_deterministic_init():
    a, b = MhaParams(16, 4, seed=11), MhaParams(16, 4, seed=11)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    assert np.all(a.b_q.data == 0) and np.max(np.abs(a.W_q.data)) <= 0.04


def test_param_count():
    assert MhaParams(12, 3).num_parameters() == MhaParams.count(12) == 4 * 144 + 48


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 7), st.sampled_from([(4, 1), (8, 2), (8, 4), (12, 3)]),
       st.integers(0, 10**6))
def test_kv_permutation_invariance(lq, lkv, dh, seed):
    d, h = dh
    p = random_params(d, h, seed % 1000)
    rng = np.random.default_rng(seed)
    q, kv = rng.standard_normal((lq, d)), rng.standard_normal((lkv, d))
    perm = rng.permutation(lkv)
    a = multi_head_attention(q, kv, p).data
    b = multi_head_attention(q, kv[perm], p).data
    assert np.max(np.abs(a - b)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10**6))
def test_query_row_locality(lq, lkv, seed):
    p = random_params(8, 2, seed % 1000)
    rng = np.random.default_rng(seed)
    q, kv = rng.standard_normal((lq, 8)), rng.standard_normal((lkv, 8))
    perm = rng.permutation(lq)
    a = multi_head_attention(q, kv, p).data
    b = multi_head_attention(q[perm], kv, p).data
    assert np.max(np.abs(a[perm] - b)) < 1e-12


@pytest.mark.parametrize("d", [4, 8, 16])
def test_doubling_width_keeps_contract(d):
    for width in (d, 2 * d):
        p = MhaParams(width, 2, seed=0)
        out = multi_head_attention(np.ones((3, width)), np.ones((5, width)), p)
        assert out.shape == (3, width)


def test_batched_matches_per_item():
    p = random_params(8, 2, 12)
    rng = np.random.default_rng(13)
    q, kv = rng.standard_normal((3, 4, 8)), rng.standard_normal((3, 6, 8))
    batched = multi_head_attention(q, kv, p).data
    for b in range(3):
        assert np.max(np.abs(batched[b] - attention_of(p)(q[b], kv[b]))) < 1e-10


def test_gradients_over_seeds():
    for seed in range(20):
        p = random_params(8, 2, seed)
        rng = np.random.default_rng(100 + seed)
        q, kv = rng.standard_normal((3, 8)), rng.standard_normal((4, 8))
        R = rng.standard_normal((3, 8))
        errs = gradient_check(lambda: (multi_head_attention(q, kv, p) * R).sum(), p.parameters())
        assert max(errs.values()) < 1e-4, (seed, errs)
