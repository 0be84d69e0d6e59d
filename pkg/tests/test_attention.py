import numpy as np
import pytest

from conftest import make_mha
from multisource import tensor as T
from multisource.attention import (
    MultiHeadParams,
    causal_mask,
    multi_head_attention,
    padding_mask,
    scaled_dot_attention,
)
from multisource.tensor import DegenerateAttentionError, Tensor


def test_single_key_returns_its_value():
    out = scaled_dot_attention(Tensor([[3.0, -1.0], [0.2, 7.0]]), Tensor([[1.0, 2.0]]), Tensor([[4.0, 5.0, 6.0]]))
    np.testing.assert_array_equal(out.context.data, [[4.0, 5.0, 6.0], [4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(out.weights[0], [[1.0], [1.0]])


def test_two_key_hand_example():
    out = scaled_dot_attention(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]),
                               Tensor([[10.0, 0.0], [0.0, 10.0]]))
    # scores (1/sqrt 2, 0) -> softmax by scalar math
    e = np.exp([1 / np.sqrt(2), 0.0])
    expected = e / e.sum()
    np.testing.assert_allclose(out.weights[0][0], expected, rtol=1e-14)
    np.testing.assert_allclose(out.weights[0][0], [0.6698, 0.3302], atol=5e-5)
    np.testing.assert_allclose(out.context.data[0], [6.698, 3.302], atol=5e-4)


def test_identical_keys_split_evenly(rng):
    k = np.tile(rng.normal(size=(1, 3)), (2, 1))
    out = scaled_dot_attention(Tensor(rng.normal(size=(4, 3))), Tensor(k), Tensor(rng.normal(size=(2, 3))))
    np.testing.assert_allclose(out.weights[0], 0.5, rtol=1e-15)


def test_identity_projections_match_plain_attention(rng):
    d = 4
    eye = lambda: [Tensor(np.eye(d))]
    p = MultiHeadParams(eye(), eye(), eye(), eye())
    q, k, v = (Tensor(rng.normal(size=s)) for s in ((3, d), (5, d), (5, d)))
    np.testing.assert_allclose(multi_head_attention(p, q, k, v).context.data,
                               scaled_dot_attention(q, k, v).context.data, rtol=1e-14)


def test_zero_output_projection(rng):
    p = make_mha(0)
    p.wo = [Tensor(np.zeros_like(w.data)) for w in p.wo]
    out = multi_head_attention(p, *(Tensor(rng.normal(size=s)) for s in ((3, 4), (5, 4), (5, 4))))
    np.testing.assert_array_equal(out.context.data, 0.0)
    for w in out.weights:
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_multi_head_shapes_and_per_head_sum(rng):
    p = make_mha(1, d=4, heads=2)
    q, k, v = (Tensor(rng.normal(size=s)) for s in ((3, 4), (5, 4), (5, 4)))
    out = multi_head_attention(p, q, k, v)
    assert out.context.shape == (3, 4)
    assert [w.shape for w in out.weights] == [(3, 5), (3, 5)]
    # reference: each head computed alone with numpy, then summed
    ref = np.zeros((3, 4))
    for i in range(2):
        qh, kh, vh = q.data @ p.wq[i].data, k.data @ p.wk[i].data, v.data @ p.wv[i].data
        s = qh @ kh.T / np.sqrt(qh.shape[1])
        w = np.exp(s - s.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        np.testing.assert_allclose(out.weights[i], w, atol=1e-15)
        ref += w @ vh @ p.wo[i].data
    np.testing.assert_allclose(out.context.data, ref, atol=1e-12)


def test_causal_mask():
    assert causal_mask(1).tolist() == [[True]]
    np.testing.assert_array_equal(causal_mask(3), np.tril(np.ones((3, 3), bool)))
    with pytest.raises(ValueError):
        causal_mask(0)


def test_causal_attention_position_zero_ignores_future(rng):
    q = Tensor(rng.normal(size=(4, 3)))
    k = Tensor(rng.normal(size=(4, 3)), True)
    v = Tensor(rng.normal(size=(4, 3)), True)
    out = scaled_dot_attention(q, k, v, causal_mask(4))
    first_row = T.reshape(out.context, (-1,))
    picked = T.mul(first_row, Tensor(np.r_[np.ones(3), np.zeros(9)]))
    T.backward(T.sum_all(picked))
    assert (k.grad[1:] == 0).all() and (v.grad[1:] == 0).all()
    assert np.abs(v.grad[0]).sum() > 0


def test_padding_mask():
    assert padding_mask([3], 3).tolist() == [[[True, True, True]]]
    assert padding_mask([1], 4).tolist() == [[[True, False, False, False]]]
    with pytest.raises(ValueError):
        padding_mask([0], 3)


def test_padding_equals_truncation(rng):
    q = Tensor(rng.normal(size=(3, 4)))
    k, v = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    mask = padding_mask([4], 6)[0]
    padded = scaled_dot_attention(q, Tensor(k), Tensor(v), mask)
    cut = scaled_dot_attention(q, Tensor(k[:4]), Tensor(v[:4]))
    np.testing.assert_allclose(padded.context.data, cut.context.data, atol=1e-15)
    assert (padded.weights[0][:, 4:] == 0).all()


def test_fully_masked_row_raises(rng):
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(DegenerateAttentionError):
        scaled_dot_attention(*(Tensor(rng.normal(size=(2, 2))) for _ in range(3)), mask)


@pytest.mark.parametrize("seed", range(10))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 5))
    mask = rng.random((3, 6)) < 0.7
    mask[:, 0] = True
    perm = rng.permutation(6)
    a = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v), mask).context.data
    b = scaled_dot_attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), mask[:, perm]).context.data
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_value_shift(seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 5))
    c = rng.normal()
    a = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).context.data
    b = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v + c)).context.data
    np.testing.assert_allclose(b, a + c, atol=1e-9)


def test_batched_attention_matches_per_example(rng):
    p = make_mha(3, d=4, heads=2)
    q, kv = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4))
    mask = padding_mask([5, 2], 5)
    batched = multi_head_attention(p, Tensor(q), Tensor(kv), Tensor(kv), mask)
    for b in range(2):
        single = multi_head_attention(p, Tensor(q[b]), Tensor(kv[b]), Tensor(kv[b]), mask[b])
        np.testing.assert_allclose(batched.context.data[b], single.context.data, atol=1e-14)
