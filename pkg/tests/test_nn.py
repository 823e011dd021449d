import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardio_dg.nn import ParamStore, Tensor, no_grad, ops
from conftest import check_gradients, leaf

SEEDS = range(20)


# ------------------------------------------------------------ examples


def test_conv1d_hand_example():
    x = Tensor(np.array([[[1.0, 2, 3, 4]]]))
    w = Tensor(np.array([[[1.0, 0, -1]]]))
    np.testing.assert_array_equal(ops.conv1d(x, w).data, [[[-2.0, -2.0]]])


def test_conv1d_identity_kernel():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 9)))
    w = Tensor(np.array([[[0.0, 1, 0]]]))
    np.testing.assert_array_equal(ops.conv1d(x, w, pad=1).data, x.data)


@pytest.mark.parametrize("n,k,s,p", [(10, 3, 1, 1), (11, 3, 2, 1), (5000, 7, 2, 3), (8, 8, 1, 0), (9, 1, 3, 0)])
def test_conv1d_output_length(n, k, s, p):
    x = Tensor(np.zeros((1, 1, n)))
    w = Tensor(np.zeros((1, 1, k)))
    assert ops.conv1d(x, w, stride=s, pad=p).shape[-1] == (n + 2 * p - k) // s + 1


def test_conv1d_shape_errors():
    with pytest.raises(ValueError):
        ops.conv1d(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 3, 3))))
    with pytest.raises(ValueError):
        ops.conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 5))))


def test_batchnorm_two_values():
    x = Tensor(np.array([[[1.0]], [[3.0]]]))  # B=2, C=1, T=1
    out = ops.batchnorm1d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), True, eps=0.0)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0])


def test_batchnorm_affine_and_eval_defaults():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3, 16))
    # eval before any training step uses mu=0, var=1
    out = ops.batchnorm1d(Tensor(x), Tensor(2 * np.ones(3)), Tensor(5 * np.ones(3)), np.zeros(3), np.ones(3),
                          False, eps=0.0)
    np.testing.assert_allclose(out.data, 2 * x + 5, atol=1e-12)


def test_batchnorm_training_statistics_and_running_update():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 4, 30)) * 3 + 2
    rm, rv = np.zeros(4), np.ones(4)
    out = ops.batchnorm1d(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, True, 0.1, 1e-5).data
    np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(out.std(axis=(0, 2)), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2), ddof=1))


def test_elementwise_examples():
    np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0, 2]))).data, [0, 0, 2])
    assert ops.sigmoid(Tensor(np.array(0.0))).data == 0.5
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros((1, 7)))).data, np.full((1, 7), 1 / 7))


def test_sigmoid_extremes_are_finite():
    out = ops.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_softmax_sums_to_one_for_large_logits():
    z = np.random.default_rng(4).uniform(-100, 100, (6, 7))
    p = ops.softmax(Tensor(z)).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-7)
    assert np.all(np.isfinite(ops.log_softmax(Tensor(z)).data))


def test_global_avg_pool():
    x = Tensor(np.array([[[1.0, 2, 3], [4, 5, 6]]]), requires_grad=True)
    out = ops.global_avg_pool(x)
    np.testing.assert_array_equal(out.data, [[2.0, 5.0]])
    out.backward(np.array([[3.0, 6.0]]))
    np.testing.assert_allclose(x.grad, [[[1, 1, 1], [2, 2, 2]]])
    with pytest.raises(ValueError):
        ops.global_avg_pool(Tensor(np.zeros((1, 2, 0))))


def test_dropout_identities():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((3, 10)))
    assert ops.dropout(x, 0.0, True, rng) is x
    assert ops.dropout(x, 0.7, False, rng) is x
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, True, rng)


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(6)
    x = Tensor(np.ones((200, 200)))
    out = ops.dropout(x, 0.25, True, rng).data
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    assert abs(out.mean() - 1) < 0.02


def test_linear_identity_and_concat_order():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ops.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
    a, b = Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 3)))
    np.testing.assert_array_equal(ops.concat([a, b]).data, [[0, 0, 1, 1, 1]])


def test_backward_sum_and_accumulation():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones((2, 2)))


def test_backward_through_unrecorded_tensor_fails():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(3)).sum().backward()
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.mul(x, 2.0).sum()
    with pytest.raises(RuntimeError):
        y.backward()


def test_shared_node_visited_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ops.mul(x, x)
    z = ops.add(y, y)  # diamond: y feeds z twice
    z.backward(np.ones(1))
    np.testing.assert_allclose(x.grad, [8.0])


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), np.float32), requires_grad=True)
    y = ops.add(ops.mul(x, 0.5), 1.0)
    assert y.dtype == np.float32


# ------------------------------------------------------ gradient checks


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, 3))
    a, b = leaf(rng, *shape), leaf(rng, *shape)
    pos = Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)
    bshape = (1, shape[1], 1)
    c = leaf(rng, *bshape)
    assert check_gradients(lambda: ops.add(ops.mul(a, b), c), [a, b, c], rng) < 1e-5
    assert check_gradients(lambda: ops.sub(ops.div(a, pos), c), [a, pos, c], rng) < 1e-5
    assert check_gradients(lambda: ops.mul(ops.sqrt(pos), ops.log(pos)), [pos], rng) < 1e-5
    assert check_gradients(lambda: ops.exp(ops.square(a)), [a], rng) < 1e-5
    assert check_gradients(lambda: ops.sigmoid(a), [a], rng) < 1e-5
    assert check_gradients(lambda: ops.relu(a), [a], rng) < 1e-5
    assert check_gradients(lambda: ops.clamp_min(a, 0.1), [a], rng) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reductions_and_indexing(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4, 5)
    perm = rng.permutation(3)
    assert check_gradients(lambda: ops.mean(x, axis=2, keepdims=True), [x], rng) < 1e-5
    assert check_gradients(lambda: ops.sum(x, axis=1), [x], rng) < 1e-5
    assert check_gradients(lambda: ops.global_avg_pool(x), [x], rng) < 1e-5
    assert check_gradients(lambda: ops.take(x, perm, 0), [x], rng) < 1e-5
    assert check_gradients(lambda: ops.take(x, [0, 0, 2], 0), [x], rng) < 1e-5
    assert check_gradients(lambda: ops.getitem(x, (slice(None), 1)), [x], rng) < 1e-5
    assert check_gradients(lambda: ops.reshape(x, (3, 20)), [x], rng) < 1e-5
    y = leaf(rng, 3, 2, 5)
    assert check_gradients(lambda: ops.concat([x, y], axis=1), [x, y], rng) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_dense_and_softmax(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng, 4, 6), leaf(rng, 3, 6), leaf(rng, 3)
    m = leaf(rng, 6, 2)
    assert check_gradients(lambda: ops.linear(x, w, b), [x, w, b], rng) < 1e-5
    assert check_gradients(lambda: ops.matmul(x, m), [x, m], rng) < 1e-5
    z = leaf(rng, 4, 7, scale=3.0)
    assert check_gradients(lambda: ops.log_softmax(z), [z], rng) < 1e-5
    assert check_gradients(lambda: ops.softmax(z), [z], rng) < 1e-5
    mask_rng_seed = int(rng.integers(1 << 30))
    assert check_gradients(
        lambda: ops.dropout(x, 0.3, True, np.random.default_rng(mask_rng_seed)), [x], rng) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv1d(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = rng.integers(1, 4, 2)
    k = int(rng.integers(1, 6))
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, k))
    n_time = int(rng.integers(max(k, 4), 12))
    x, w, b = leaf(rng, 2, c_in, n_time), leaf(rng, c_out, c_in, k), leaf(rng, c_out)
    assert check_gradients(lambda: ops.conv1d(x, w, b, stride, pad), [x, w, b], rng) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_grad_batchnorm(seed, training):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 5))
    x, g, b = leaf(rng, 3, c, 6), leaf(rng, c), leaf(rng, c)
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)

    def build():
        return ops.batchnorm1d(x, g, b, rm.copy(), rv.copy(), training)

    assert check_gradients(build, [x, g, b], rng) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 9), st.integers(1, 3), st.integers(0, 2),
       st.integers(0, 2**31 - 1))
def test_conv1d_matches_direct_loop(c_in, c_out, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    n_time = k + int(rng.integers(0, 10))
    x = rng.standard_normal((2, c_in, n_time))
    w = rng.standard_normal((c_out, c_in, k))
    got = ops.conv1d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    t_out = (n_time + 2 * pad - k) // stride + 1
    want = np.zeros((2, c_out, t_out))
    for t in range(t_out):
        want[:, :, t] = np.einsum("bck,ock->bo", xp[:, :, t * stride : t * stride + k], w)
    np.testing.assert_allclose(got, want, atol=1e-10)


# ---------------------------------------------------------- param store


def test_param_store_flat_roundtrip():
    store = ParamStore(np.float32)
    store.add("a.weight", np.arange(6.0).reshape(2, 3))
    store.add("a.bias", np.ones(2), decay=False)
    store.add_buffer("bn.running_mean", np.zeros(2))
    flat = store.flat_state()
    assert flat.dtype == np.float32 and flat.size == store.n_state() == 10
    assert [k for k, _ in store.layout()] == ["a.weight", "a.bias", "bn.running_mean"]
    store.load_flat_state(np.arange(10, dtype=np.float32))
    np.testing.assert_array_equal(store.buffers["bn.running_mean"], [8, 9])
    assert "a.bias" in store.no_decay
    with pytest.raises(ValueError):
        store.load_flat_state(np.zeros(9, np.float32))
