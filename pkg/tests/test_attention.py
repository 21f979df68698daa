import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyinv.attention import (AttentionParams, BlockParams, FfnParams, LayerNormParams, attention_forward,
                               attention_from_dict, attention_to_dict, block_forward, block_from_dict,
                               block_to_dict, check_block, check_qk, check_vo, is_permutation_matrix,
                               layer_norm, permutation_matrix, permute_block, qk_transform, random_attention,
                               random_block, random_non_involutive_permutation, random_well_conditioned,
                               run_checks, vo_transform)
from polyinv.polynet import DimensionError


def _dense_reference(p, X):
    """Loop-based recomputation of scores, weights and output."""
    n = len(X)
    Q, K, V = X @ p.W_Q, X @ p.W_K, X @ p.W_V
    S = np.array([[sum(Q[i, a] * K[j, a] for a in range(p.d_k)) for j in range(n)] for i in range(n)])
    A = np.empty_like(S)
    for i in range(n):
        e = [math.exp(S[i, j] / math.sqrt(p.d_k)) for j in range(n)]
        A[i] = [v / sum(e) for v in e]
    Y = np.array([[sum(A[i, j] * sum(V[j, c] * p.W_O[c, f] for c in range(p.d_v)) for j in range(n))
                   for f in range(p.d)] for i in range(n)])
    return S, A, Y


def _block_reference(bp, X, eps=1e-5):
    def ln(Z, g, b):
        out = np.empty_like(Z)
        for i, row in enumerate(Z):
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            out[i] = [g[k] * (row[k] - mu) / math.sqrt(var + eps) + b[k] for k in range(len(row))]
        return out

    Y = X + _dense_reference(bp.attn, ln(X, bp.ln1.gamma, bp.ln1.beta))[2]
    act = np.tanh if bp.ffn.activation == "tanh" else (lambda z: np.maximum(z, 0))
    return Y + act(ln(Y, bp.ln2.gamma, bp.ln2.beta) @ bp.ffn.W_1) @ bp.ffn.W_2


def test_forward_against_dense_reference():
    rng = np.random.default_rng(0)
    p = random_attention(4, 3, 2, rng)
    X = rng.standard_normal((3, 4))
    for got, ref in zip(attention_forward(p, X), _dense_reference(p, X)):
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-14)


def test_zero_query_key_gives_uniform_weights():
    rng = np.random.default_rng(1)
    p = random_attention(5, 2, 5, rng)
    p = AttentionParams(np.zeros((5, 2)), np.zeros((5, 2)), p.W_V, p.W_O)
    S, A, _ = attention_forward(p, rng.standard_normal((4, 5)))
    assert np.all(S == 0) and np.allclose(A, 0.25, rtol=0, atol=1e-15)
    _, A1, _ = attention_forward(p, rng.standard_normal((1, 5)))
    assert A1.tolist() == [[1.0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_are_stochastic(seed):
    rng = np.random.default_rng(seed)
    p = random_attention(6, 3, 4, rng)
    _, A, _ = attention_forward(p, 3 * rng.standard_normal((7, 6)))
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_query_key_transform():
    rng = np.random.default_rng(2)
    p = random_attention(8, 4, 8, rng)
    assert np.array_equal(qk_transform(p, np.eye(4)).W_Q, p.W_Q)
    P = random_well_conditioned(4, rng)
    q = qk_transform(p, P)
    np.testing.assert_allclose(q.W_Q @ q.W_K.T, p.W_Q @ p.W_K.T, rtol=0, atol=1e-12)
    res = check_qk(p, P, rng.standard_normal((6, 8)))
    assert res["scores"] <= 1e-10 and res["weights"] <= 1e-10 and res["control"] > 1e-3
    D = np.diag(np.exp(rng.uniform(-1, 1, 4)))
    q = qk_transform(p, D)
    np.testing.assert_allclose(q.W_Q, p.W_Q * np.diag(D), rtol=1e-15)
    np.testing.assert_allclose(q.W_K, p.W_K / np.diag(D), rtol=1e-15)
    with pytest.raises(ValueError):
        qk_transform(p, np.zeros((4, 4)))


def test_query_key_composition():
    rng = np.random.default_rng(3)
    p = random_attention(6, 3, 6, rng)
    P1, P2 = random_well_conditioned(3, rng), random_well_conditioned(3, rng)
    a, b = qk_transform(qk_transform(p, P1), P2), qk_transform(p, P1 @ P2)
    np.testing.assert_allclose(a.W_Q, b.W_Q, rtol=0, atol=1e-10)
    np.testing.assert_allclose(a.W_K, b.W_K, rtol=0, atol=1e-10)


def test_value_output_transform():
    rng = np.random.default_rng(4)
    p = random_attention(8, 4, 5, rng)
    R = random_well_conditioned(5, rng)
    q = vo_transform(p, R)
    np.testing.assert_allclose(q.W_V @ q.W_O, p.W_V @ p.W_O, rtol=0, atol=1e-12)
    assert np.max(np.abs(q.W_V - p.W_V)) > 0
    res = check_vo(p, R, rng.standard_normal((6, 8)))
    assert res["output"] <= 1e-10 and res["control"] > 1e-3


def test_zero_weights_pass_through():
    d = 6
    zero = BlockParams(AttentionParams(np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d)), np.zeros((d, d))),
                       LayerNormParams.plain(d), LayerNormParams.plain(d), FfnParams(np.zeros((d, 4)), np.zeros((4, d))))
    X = np.random.default_rng(5).standard_normal((3, d))
    np.testing.assert_array_equal(block_forward(zero, X), X)


def test_constant_rows_normalize_to_zero():
    X = np.full((2, 5), 3.7)
    assert np.all(layer_norm(X, LayerNormParams.plain(5)) == 0.0)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_block_against_reference(activation):
    rng = np.random.default_rng(6)
    bp = random_block(4, 5, rng, activation)
    X = rng.standard_normal((3, 4))
    np.testing.assert_allclose(block_forward(bp, X), _block_reference(bp, X), rtol=1e-11, atol=1e-12)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_block_permutation_equivariance(activation):
    rng = np.random.default_rng(7)
    bp = random_block(8, 16, rng, activation)
    P = random_non_involutive_permutation(8, rng)
    X = rng.standard_normal((5, 8))
    res = check_block(bp, P, X)
    assert res["block"] <= 1e-10 and res["layer_norm"] <= 1e-12 and res["control"] > 1e-3
    same = permute_block(bp, np.eye(8))
    np.testing.assert_array_equal(block_forward(same, X), block_forward(bp, X))


def test_permute_block_checks():
    rng = np.random.default_rng(8)
    bp = random_block(4, 3, rng)
    with pytest.raises(ValueError):
        permute_block(bp, 0.5 * np.eye(4))
    assert is_permutation_matrix(permutation_matrix([2, 0, 1]))
    P = random_non_involutive_permutation(5, rng)
    assert not np.array_equal(P @ P, np.eye(5))


def test_dimension_errors():
    with pytest.raises(DimensionError):
        AttentionParams(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))
    p = random_attention(3, 2, 3, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        attention_forward(p, np.zeros((2, 4)))


def test_run_checks_and_identity():
    res = run_checks(0, n_instances=5)
    assert max(res["max_deviation"].values()) <= 1e-10
    assert min(res["min_control_deviation"].values()) > 1e-3
    ident = run_checks(0, n_instances=3, identity=True)
    assert all(v == 0.0 for v in ident["max_deviation"].values())


def test_json_round_trips():
    rng = np.random.default_rng(9)
    bp = random_block(4, 6, rng, "tanh")
    back = block_from_dict(block_to_dict(bp))
    X = rng.standard_normal((2, 4))
    np.testing.assert_array_equal(block_forward(back, X), block_forward(bp, X))
    p = attention_from_dict(attention_to_dict(bp.attn))
    np.testing.assert_array_equal(p.W_O, bp.attn.W_O)
    with pytest.raises(ValueError, match="W_K"):
        attention_from_dict({"W_Q": [[1.0]], "W_V": [[1.0]], "W_O": [[1.0]]})
