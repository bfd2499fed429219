import math

import numpy as np
import pytest

from errors import ConfigError, ShapeError
from ml.attention import MultiHeadAttention, cross_attention, self_attention
from ml.rpe import box_mask_bias
from ml.tensor import Parameter, ParameterStore, Tensor, finite_diff_check, mul, sum_
from models import RotatedBox3


@pytest.fixture
def attn():
    return MultiHeadAttention(ParameterStore(np.random.default_rng(0)), "attn", d_model=8, heads=2)


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        MultiHeadAttention(ParameterStore(), "attn", d_model=10, heads=3)


def test_output_and_weight_shapes(attn, rng):
    q, kv = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8)))
    out, weights = cross_attention(attn, q, kv, kv)
    assert out.shape == (3, 8)
    assert weights.shape == (2, 3, 5)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)


def test_zero_bias_changes_nothing(attn, rng):
    q, kv = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8)))
    plain, _ = attn.forward(q, kv, kv)
    biased, _ = attn.forward(q, kv, kv, Tensor(np.zeros((2, 3, 5))))
    np.testing.assert_array_equal(plain.data, biased.data)


def test_shared_mask_bias_blocks_keys(attn, rng):
    q, kv = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(4, 8)))
    mask = np.zeros((1, 2, 4))
    mask[:, :, 2:] = -1e4
    _, weights = attn.forward(q, kv, kv, Tensor(mask))
    assert np.all(weights.data[:, :, 2:] < 1e-12)


@pytest.mark.parametrize("shape", [(3, 2, 4), (2, 4), (2, 2, 5)])
def test_bad_bias_shape(attn, rng, shape):
    q, kv = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(4, 8)))
    with pytest.raises(ShapeError):
        attn.forward(q, kv, kv, Tensor(np.zeros(shape)))


def test_width_mismatch(attn, rng):
    with pytest.raises(ShapeError):
        attn.forward(Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=(4, 8))),
                     Tensor(rng.normal(size=(4, 8))))


def test_self_attention_shape(attn, rng):
    assert self_attention(attn, Tensor(rng.normal(size=(4, 8)))).shape == (4, 8)


def test_gradients_through_bias(attn, rng):
    q, kv = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(3, 8)))
    bias = Parameter(rng.normal(size=(2, 2, 3)), "bias")
    target = rng.normal(size=(2, 8))
    params = [attn.wq, attn.wk, attn.wv, attn.wo, bias]

    def loss():
        out, _ = attn.forward(q, kv, kv, bias)
        return sum_(mul(out, target))

    assert finite_diff_check(params, loss) < 1e-6


def _project(x, w, b):
    return x @ w.data + b.data


def test_single_head_matches_loop(rng):
    attn = MultiHeadAttention(ParameterStore(np.random.default_rng(1)), "attn", d_model=4, heads=1)
    queries, keys = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    bias = rng.normal(size=(1, 2, 3))
    out, weights = attn.forward(Tensor(queries), Tensor(keys), Tensor(keys), Tensor(bias))

    q = _project(queries, attn.wq, attn.bq)
    k = _project(keys, attn.wk, attn.bk)
    v = _project(keys, attn.wv, attn.bv)
    expected = np.zeros((2, 4))
    for i in range(2):
        logits = [q[i] @ k[j] / 2.0 + bias[0, i, j] for j in range(3)]
        e = [math.exp(z - max(logits)) for z in logits]
        row = [x / sum(e) for x in e]
        np.testing.assert_allclose(weights.data[0, i], row, atol=1e-12)
        mixed = sum(row[j] * v[j] for j in range(3))
        expected[i] = _project(mixed, attn.wo, attn.bo)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_row_constant_in_bias_changes_nothing(attn, rng):
    q, kv = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8)))
    bias = rng.normal(size=(2, 3, 5))
    shifted = bias + rng.uniform(-50.0, 50.0, size=(2, 3, 1))
    plain, _ = attn.forward(q, kv, kv, Tensor(bias))
    moved, _ = attn.forward(q, kv, kv, Tensor(shifted))
    np.testing.assert_allclose(moved.data, plain.data, atol=1e-10)


def test_self_attention_permutation_equivariant(attn, rng):
    x = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    out = self_attention(attn, Tensor(x)).data
    permuted = self_attention(attn, Tensor(x[perm])).data
    np.testing.assert_allclose(permuted, out[perm], atol=1e-12)


def test_self_attention_single_query(attn, rng):
    x = rng.normal(size=(1, 8))
    expected = _project(_project(x, attn.wv, attn.bv), attn.wo, attn.bo)
    np.testing.assert_allclose(self_attention(attn, Tensor(x)).data, expected, atol=1e-12)


def test_mask_with_one_point_inside_returns_its_value(attn, rng):
    box = RotatedBox3((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.4)
    points = np.array([[0.1, -0.1, 0.2], [2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, -4.0]])
    keys = rng.normal(size=(4, 8))
    mask = box_mask_bias([box], points, -1e4).data[None]
    out, weights = attn.forward(Tensor(rng.normal(size=(1, 8))), Tensor(keys), Tensor(keys), Tensor(mask))
    np.testing.assert_allclose(weights.data[:, 0], [[1.0, 0.0, 0.0, 0.0]] * 2, atol=1e-12)
    expected = _project(_project(keys[:1], attn.wv, attn.bv), attn.wo, attn.bo)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
