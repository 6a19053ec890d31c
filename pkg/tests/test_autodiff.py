import numpy as np
import pytest
from conftest import finite_difference, relative_error
from hypothesis import given, settings
from hypothesis import strategies as st

from syngrid import autodiff as ad
from syngrid.autodiff import Parameter, Tensor
from syngrid.errors import GraphConsumed, ShapeMismatch

RNG = np.random.default_rng(0)


def leaf(*shape, scale=1.0):
    return Tensor(RNG.standard_normal(shape) * scale, requires_grad=True)


def check_gradients(build, *inputs, tol=1e-4):
    """Compare autodiff against central differences for ``sum(build(*inputs) * w)``."""
    out = build(*inputs)
    weights = np.random.default_rng(1).standard_normal(out.shape)

    def loss_value():
        return float((build(*inputs).data * weights).sum())

    with_grad = ad.sum_(ad.mul(build(*inputs), Tensor(weights)))
    for x in inputs:
        x.zero_grad()
    with_grad.backward()
    for x in inputs:
        numeric = finite_difference(loss_value, x.data)
        assert relative_error(x.grad, numeric) < tol


def test_add_with_bias_broadcast():
    check_gradients(lambda a, b: a + b, leaf(3, 4, 5), leaf(5))


def test_mul_elementwise_and_scalar():
    check_gradients(lambda a, b: (a * b) * 2.5, leaf(4, 3), leaf(4, 3))


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 2, 3, 4), (2, 2, 4, 3))])
def test_matmul(sa, sb):
    check_gradients(ad.matmul, leaf(*sa), leaf(*sb))


def test_transpose_and_reshape():
    check_gradients(lambda a: a.transpose(0, 2, 1, 3).reshape(2, 4, 6), leaf(2, 3, 4, 2))


def test_concat_and_slice():
    check_gradients(lambda a, b: ad.concat([a, b], axis=1)[:, 1:4], leaf(2, 3, 2), leaf(2, 2, 2))


def test_embedding_gather_with_repeats():
    table = leaf(6, 3)
    check_gradients(lambda t: ad.embedding_gather(t, [[0, 2, 2], [5, 0, 1]]), table)


def test_relu():
    x = Tensor(np.array([[-1.5, 0.3, 2.0], [0.7, -0.2, -3.0]]), requires_grad=True)
    check_gradients(ad.relu, x)


def test_dropout_fixed_seed():
    x = leaf(4, 5)
    check_gradients(lambda a: ad.dropout(a, 0.3, np.random.default_rng(3)), x)


def test_layernorm():
    check_gradients(lambda x, g, b: ad.layernorm(x, g, b), leaf(3, 4, 6), leaf(6), leaf(6))


def test_softmax():
    check_gradients(ad.softmax_lastdim, leaf(3, 5))


def test_masked_softmax():
    allow = np.array([[True, False, True, True], [False, True, True, False]])
    check_gradients(lambda x: ad.masked_softmax(x, allow), leaf(2, 4))


def test_cross_entropy_with_padding():
    logits = leaf(2, 4, 6)
    targets = np.array([[1, 2, 5, 5], [0, 3, 4, 5]])
    check_gradients(lambda x: ad.cross_entropy(x, targets, pad_id=5), logits)


def test_sum_and_mean():
    check_gradients(lambda x: ad.mean(x, axis=1, keepdims=True) + ad.sum_(x, axis=0), leaf(3, 3))


def test_masked_softmax_example():
    p = ad.masked_softmax(Tensor([5.0, -3.0, 7.0]), [True, False, True]).data
    assert p[1] == 0.0
    assert p[0] + p[2] == pytest.approx(1.0, abs=1e-12)


def test_softmax_example():
    p = ad.softmax_lastdim(Tensor([1.0, 2.0])).data
    np.testing.assert_allclose(p, [0.26894, 0.73106], atol=1e-4)


def test_layernorm_example():
    out = ad.layernorm(Tensor([1.0, 3.0]), eps=1e-12).data
    np.testing.assert_allclose(out, [-1.0, 1.0], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_masked_softmax_ignores_disallowed_logits(n, seed):
    rng = np.random.default_rng(seed)
    allow = rng.random((3, n)) < 0.5
    allow[:, 0] = True
    logits = rng.standard_normal((3, n)) * 10
    p = ad.masked_softmax(Tensor(logits), allow).data
    assert np.all(p[~allow] == 0.0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    noisy = logits + np.where(allow, 0.0, rng.standard_normal((3, n)) * 1e3)
    assert np.array_equal(ad.masked_softmax(Tensor(noisy), allow).data, p)


def test_cross_entropy_ignores_pad():
    logits = Tensor(np.random.default_rng(2).standard_normal((1, 3, 4)))
    a = ad.cross_entropy(logits, [[1, 2, 3]], pad_id=3).item()
    b = ad.cross_entropy(logits[:, :2], [[1, 2]]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_dropout_identity_in_eval_and_deterministic_in_train():
    x = leaf(5, 5)
    assert ad.dropout(x, 0.5, None, training=False) is x
    a = ad.dropout(x, 0.5, np.random.default_rng(9)).data
    b = ad.dropout(x, 0.5, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


def test_backward_examples():
    w = Tensor([1.0, 2.0], requires_grad=True)
    ad.sum_(w * w).backward()
    assert w.grad.tolist() == [2.0, 4.0]


def test_reused_parameter_accumulates():
    w = Tensor([0.5, -1.0, 2.0], requires_grad=True)
    x1, x2 = np.array([1.0, 2.0, 3.0]), np.array([-4.0, 0.5, 1.0])
    loss = ad.sum_(w * Tensor(x1)) + ad.sum_(w * Tensor(x2))
    loss.backward()
    np.testing.assert_array_equal(w.grad, x1 + x2)


def test_backward_twice_raises():
    w = Tensor([1.0], requires_grad=True)
    loss = ad.sum_(w * w)
    loss.backward()
    with pytest.raises(GraphConsumed):
        loss.backward()


def test_backward_needs_scalar():
    with pytest.raises(ShapeMismatch):
        (leaf(2) * 2.0).backward()


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(leaf(2, 3), leaf(4, 5))
    with pytest.raises(ShapeMismatch):
        leaf(2, 3) + leaf(4, 3)
    with pytest.raises(ShapeMismatch):
        ad.concat([leaf(2, 3), leaf(3, 2)], axis=0)
    with pytest.raises(ShapeMismatch):
        ad.cross_entropy(leaf(2, 4), [1, 2, 3])


def test_no_grad_builds_no_graph():
    w = leaf(3)
    with ad.no_grad():
        out = w * 2.0
    assert not out.requires_grad and out._parents == ()


def test_adam_first_step_is_sign_of_gradient():
    p = Parameter("w", np.array([0.5, -0.5, 1.0, 0.0]))
    before = p.data.copy()
    grads = {"w": np.array([3.0, -0.01, 1e-2, -7.0])}
    ad.adam_step({"w": p}, ad.AdamState(), 1e-3, grads)
    np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(grads["w"]), rtol=1e-5)


def test_adam_zero_grad_and_determinism():
    a = Parameter("w", np.ones(3))
    ad.adam_step({"w": a}, ad.AdamState(), 1e-2, {"w": np.zeros(3)})
    assert a.data.tolist() == [1.0, 1.0, 1.0]
    results = []
    for _ in range(2):
        p = Parameter("w", np.arange(3.0))
        state = ad.AdamState()
        for g in ([1.0, -2.0, 0.5], [0.3, 0.3, -0.1]):
            ad.adam_step({"w": p}, state, 1e-2, {"w": np.array(g)})
        results.append(p.data.copy())
    assert np.array_equal(*results)


def test_count_params():
    w = Parameter("w", np.zeros((128, 128)))
    b = Parameter("b", np.zeros(128))
    assert ad.count_params({"w": w, "b": b}) == 16512
    assert ad.count_params([w, b, w, w]) == 16512
    frozen = Parameter("f", np.zeros(10), trainable=False)
    assert ad.count_params([w, frozen]) == 16384
    assert ad.count_params([w, frozen], trainable_only=False) == 16394


def test_checkpoint_round_trip_float32(tmp_path):
    params = {
        "a": Parameter("a", np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)),
        "b.c": Parameter("b.c", np.array([1e-30, -3.4e38, np.pi], dtype=np.float32)),
    }
    path = tmp_path / "ckpt.npz"
    ad.save_params(path, params, {"note": "x"})
    arrays, meta = ad.load_params(path)
    assert meta == {"note": "x"}
    for name, p in params.items():
        assert arrays[name].dtype == np.float32
        assert arrays[name].tobytes() == p.data.tobytes()
