import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpsim.tensor_core import (AttentionPartial, GqaMap, attention_partial, empty_partial,
                               finite_difference_gradients, merge_partials, reference_attention_backward,
                               reference_attention_forward)


def brute_force_attention(q, k, v, r, causal):
    """Scalar double loop over (i, j); no vectorised path."""
    S, H, d = q.shape
    out = np.zeros_like(q)
    for h in range(H):
        kv = h // r
        for i in range(S):
            scores = []
            for j in range(S):
                if causal and j > i:
                    continue
                s = sum(q[i, h, t] * k[j, kv, t] for t in range(d)) / math.sqrt(d)
                scores.append((j, s))
            m = max(s for _, s in scores)
            z = sum(math.exp(s - m) for _, s in scores)
            for j, s in scores:
                w = math.exp(s - m) / z
                for t in range(d):
                    out[i, h, t] += w * v[j, kv, t]
    return out


def rand_qkv(seed, S, H_q, H_kv, d):
    rng = np.random.default_rng(seed)
    return (rng.uniform(-1, 1, (S, H_q, d)), rng.uniform(-1, 1, (S, H_kv, d)),
            rng.uniform(-1, 1, (S, H_kv, d)))


def rel_err(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_symmetric_scores_example():
    q = k = np.array([[[1.0]], [[1.0]]])
    v = np.array([[[2.0]], [[4.0]]])
    out, _ = reference_attention_forward(q, k, v, GqaMap(1, 1), causal=True)
    assert out[:, 0, 0].tolist() == [2.0, 3.0]


def test_zero_keys_give_running_mean():
    rng = np.random.default_rng(0)
    q = rng.uniform(-1, 1, (5, 2, 3))
    k = np.zeros((5, 2, 3))
    v = rng.uniform(-1, 1, (5, 2, 3))
    out, _ = reference_attention_forward(q, k, v, GqaMap(2, 2), causal=True)
    for i in range(5):
        np.testing.assert_allclose(out[i], v[: i + 1].mean(axis=0), atol=1e-15)


def test_forward_matches_brute_force_seed7():
    q, k, v = rand_qkv(7, 8, 4, 2, 4)
    out, _ = reference_attention_forward(q, k, v, GqaMap(4, 2), causal=True)
    assert np.max(np.abs(out - brute_force_attention(q, k, v, 2, True))) <= 1e-12


def test_non_causal_matches_brute_force():
    q, k, v = rand_qkv(8, 6, 2, 1, 3)
    out, _ = reference_attention_forward(q, k, v, GqaMap(2, 1), causal=False)
    assert np.max(np.abs(out - brute_force_attention(q, k, v, 2, False))) <= 1e-12


def test_forward_errors():
    q, k, v = rand_qkv(1, 4, 2, 1, 3)
    with pytest.raises(ValueError, match="head counts"):
        reference_attention_forward(q, k, v, GqaMap(2, 2))
    with pytest.raises(ValueError, match="sequence mismatch"):
        reference_attention_forward(q[:3], k, v, GqaMap(2, 1))
    bad = q.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        reference_attention_forward(bad, k, v, GqaMap(2, 1))
    with pytest.raises(ValueError):
        GqaMap(3, 2)


def test_backward_zero_cotangent():
    q, k, v = rand_qkv(2, 5, 2, 1, 3)
    gqa = GqaMap(2, 1)
    out, lse = reference_attention_forward(q, k, v, gqa)
    for g in reference_attention_backward(q, k, v, out, lse, np.zeros_like(out), gqa):
        assert not g.any()


def test_backward_single_token():
    q, k, v = rand_qkv(3, 1, 2, 1, 3)
    gqa = GqaMap(2, 1)
    out, lse = reference_attention_forward(q, k, v, gqa)
    d_out = np.random.default_rng(4).uniform(-1, 1, out.shape)
    dq, dk, dv = reference_attention_backward(q, k, v, out, lse, d_out, gqa)
    assert np.max(np.abs(dq)) <= 1e-15 and np.max(np.abs(dk)) <= 1e-15
    np.testing.assert_allclose(dv[:, 0], d_out[:, 0] + d_out[:, 1], atol=1e-15)


def test_backward_matches_finite_differences_seed11():
    q, k, v = rand_qkv(11, 6, 2, 1, 3)
    gqa = GqaMap(2, 1)
    out, lse = reference_attention_forward(q, k, v, gqa)
    d_out = np.random.default_rng(111).uniform(-1, 1, out.shape)
    analytic = reference_attention_backward(q, k, v, out, lse, d_out, gqa)
    numeric = finite_difference_gradients(q, k, v, d_out, gqa, step=1e-5)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) <= 1e-6


@pytest.mark.parametrize("S, H_q, R", [(S, H_q, R) for S in (2, 4, 8) for H_q in (1, 2, 4) for R in (1, 2)
                                        if H_q % R == 0])
def test_backward_finite_difference_grid(S, H_q, R):
    q, k, v = rand_qkv(S * 10 + H_q, S, H_q, H_q // R, 3)
    gqa = GqaMap(H_q, H_q // R)
    out, lse = reference_attention_forward(q, k, v, gqa)
    d_out = np.random.default_rng(S + H_q + R).uniform(-1, 1, out.shape)
    analytic = reference_attention_backward(q, k, v, out, lse, d_out, gqa)
    numeric = finite_difference_gradients(q, k, v, d_out, gqa)
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) <= 1e-6


def test_finite_difference_linear_case_exact():
    # One token: out == v, so the loss is linear in v and constant in q, k.
    q, k, v = rand_qkv(5, 1, 1, 1, 4)
    d_out = np.random.default_rng(6).uniform(-1, 1, (1, 1, 4))
    dq, dk, dv = finite_difference_gradients(q, k, v, d_out, GqaMap(1, 1))
    assert np.max(np.abs(dv - d_out)) <= 1e-10
    assert np.max(np.abs(dq)) <= 1e-10 and np.max(np.abs(dk)) <= 1e-10


def test_finite_difference_second_order_in_step():
    q, k, v = rand_qkv(12, 4, 1, 1, 2)
    gqa = GqaMap(1, 1)
    d_out = np.random.default_rng(13).uniform(-1, 1, q.shape)
    a = finite_difference_gradients(q, k, v, d_out, gqa, step=1e-5)
    b = finite_difference_gradients(q, k, v, d_out, gqa, step=2e-5)
    # Truncation error is O(step^2) ~ 1e-10; rounding adds ~1e-11 / step.
    for x, y in zip(a, b):
        assert np.max(np.abs(x - y)) <= 1e-8


def test_finite_difference_errors():
    q, k, v = rand_qkv(1, 2, 1, 1, 2)
    with pytest.raises(ValueError, match="step"):
        finite_difference_gradients(q, k, v, np.ones_like(q), GqaMap(1, 1), step=0.0)
    big = np.zeros((200, 40, 2))
    with pytest.raises(ValueError, match="limit"):
        finite_difference_gradients(big, big[:, :1], big[:, :1], big, GqaMap(40, 1))


def test_merge_identity_and_equal_halves():
    q, k, v = rand_qkv(9, 4, 2, 2, 3)
    p = attention_partial(q, k, v, GqaMap(2, 2))
    m = merge_partials(p, empty_partial(4, 2, 3))
    np.testing.assert_array_equal(m.out, p.out)
    np.testing.assert_array_equal(m.lse, p.lse)
    m = merge_partials(p, p)
    assert np.max(np.abs(m.lse - (p.lse + math.log(2)))) <= 1e-12
    assert np.max(np.abs(m.out - p.out)) <= 1e-12


def test_merge_two_single_key_partials_matches_brute_force():
    q, k, v = rand_qkv(10, 2, 1, 1, 3)
    q = q[1:]  # one query row attending to two keys
    gqa = GqaMap(1, 1)
    a = attention_partial(q, k[:1], v[:1], gqa, causal=False)
    b = attention_partial(q, k[1:], v[1:], gqa, causal=False)
    m = merge_partials(a, b)
    s = [float(q[0, 0] @ k[j, 0]) / math.sqrt(3) for j in range(2)]
    w = [math.exp(x) / sum(math.exp(y) for y in s) for x in s]
    want = w[0] * v[0, 0] + w[1] * v[1, 0]
    assert np.max(np.abs(m.out[0, 0] - want)) <= 1e-12


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        merge_partials(empty_partial(2, 1, 3), empty_partial(3, 1, 3))


def test_causal_offsets_yield_sentinel_rows():
    q, k, v = rand_qkv(14, 2, 1, 1, 2)
    p = attention_partial(q, k, v, GqaMap(1, 1), causal=True, q_offset=0, k_offset=2)
    assert np.all(p.lse == -np.inf) and not p.out.any()


partial_arrays = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s))


def _rand_partial(rng, empty_rows=False):
    out = rng.uniform(-1, 1, (3, 2, 2))
    lse = rng.uniform(-5, 5, (3, 2))
    if empty_rows:
        lse[0] = -np.inf
        out[0] = 0.0
    return AttentionPartial(out=out, lse=lse)


def assert_lse_close(a, b):
    np.testing.assert_array_equal(np.isinf(a), np.isinf(b))
    fin = np.isfinite(a)
    assert np.max(np.abs(a[fin] - b[fin]), initial=0.0) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(partial_arrays, st.booleans())
def test_merge_commutative_and_associative(rng, empty_rows):
    a, b, c = (_rand_partial(rng, empty_rows) for _ in range(3))
    ab, ba = merge_partials(a, b), merge_partials(b, a)
    assert np.max(np.abs(ab.out - ba.out)) <= 1e-12
    assert_lse_close(ab.lse, ba.lse)
    left = merge_partials(merge_partials(a, b), c)
    right = merge_partials(a, merge_partials(b, c))
    assert np.max(np.abs(left.out - right.out)) <= 1e-12
    assert_lse_close(left.lse, right.lse)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.sampled_from([(2, 1), (2, 2), (4, 2)]), st.booleans())
def test_softmax_rows_normalised(seed, S, heads, causal):
    H_q, H_kv = heads
    q, k, v = rand_qkv(seed, S, H_q, H_kv, 3)
    _, lse = reference_attention_forward(q, k, v, GqaMap(H_q, H_kv), causal=causal)
    r = H_q // H_kv
    for h in range(H_q):
        scores = q[:, h] @ k[:, h // r].T / math.sqrt(3)
        if causal:
            scores = np.where(np.tril(np.ones((S, S), bool)), scores, -np.inf)
        rows = np.exp(scores - lse[:, h][:, None]).sum(axis=1)
        assert np.max(np.abs(rows - 1.0)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(2)))
def test_forward_permutation_equivariant_over_heads(seed, kv_perm):
    # Permute kv groups and the query heads inside each group consistently.
    H_kv, r = 2, 2
    q, k, v = rand_qkv(seed, 5, H_kv * r, H_kv, 3)
    rng = np.random.default_rng(seed + 1)
    q_perm = [kv_perm[h // r] * r + p for h, p in zip(range(H_kv * r), np.tile(rng.permutation(r), H_kv))]
    gqa = GqaMap(H_kv * r, H_kv)
    out, _ = reference_attention_forward(q, k, v, gqa)
    inv_kv = np.argsort(kv_perm)
    perm_out, _ = reference_attention_forward(q[:, q_perm], k[:, inv_kv], v[:, inv_kv], gqa)
    np.testing.assert_array_equal(perm_out, out[:, q_perm])
