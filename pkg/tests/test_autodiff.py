import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seen import autodiff as ad
from seen.autodiff import BatchNormStats, Parameter, ShapeError, Tape, TapeError, Tensor

from .oracles import central_diff, conv2d_loops, rel_error


def P(a, name="w"):
    return Parameter(np.array(a, dtype=float), name, "spatial_only")


# forward examples ----------------------------------------------------------------


def test_conv_1x1_scaling():
    out = ad.conv2d(Tensor([[[[1, 2], [3, 4]]]]), P([[[[2.0]]]]), P([0.0], "b"))
    assert out.data[0, 0].tolist() == [[2, 4], [6, 8]]


def test_conv_3x3_ones_same_padding():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), P(np.ones((1, 1, 3, 3))), None)
    assert out.data[0, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_conv_bias_only():
    out = ad.conv2d(Tensor(np.random.default_rng(0).random((2, 3, 5, 5))), P(np.zeros((4, 3, 3, 3))),
                    P(np.full(4, 0.7), "b"))
    assert np.all(out.data == 0.7)


def test_conv_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), P(np.zeros((3, 5, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 5, 7]),
       st.sampled_from([1, 2]), st.integers(4, 9), st.integers(0, 10**6))
def test_conv_matches_loop_oracle(n, cin, cout, k, stride, hw, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, cin, hw, hw + 1))
    w = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    got = ad.conv2d(Tensor(x), P(w), P(b, "b"), stride=stride).data
    want = conv2d_loops(x, w, b, stride=stride, pad=k // 2)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_linear_examples():
    v = Tensor([[2.0, 3.0]])
    assert ad.linear(v, P(np.eye(2)), P(np.zeros(2), "b")).data.tolist() == [[2, 3]]
    assert ad.linear(v, P([[1, 1], [1, -1]]), P(np.zeros(2), "b")).data.tolist() == [[5, -1]]
    with pytest.raises(ShapeError):
        ad.linear(Tensor(np.zeros((1, 3))), P(np.zeros((2, 2))))


def test_pool_examples():
    assert ad.adaptive_avg_pool(Tensor([[[[1, 3], [5, 7]]]])).data.item() == 4.0
    assert np.all(ad.adaptive_avg_pool(Tensor(np.full((2, 3, 4, 5), 2.5))).data == 2.5)


def test_batchnorm_eval_init_stats_is_relu():
    x = np.random.default_rng(0).normal(size=(3, 4, 2, 2))
    stats = BatchNormStats(4, eps=0.0)
    out = ad.batchnorm_relu(Tensor(x), P(np.ones(4)), P(np.zeros(4), "s"), stats, training=False)
    np.testing.assert_array_equal(out.data, np.maximum(x, 0))


def test_batchnorm_train_normalises_and_updates_stats():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(6, 3, 4, 4))
    stats = BatchNormStats(3, eps=0.0)
    # shift large enough that ReLU never clips: out - 100 is the normalised batch
    out = ad.batchnorm_relu(Tensor(x), P(np.ones(3)), P(np.full(3, 100.0), "s"), stats, training=True).data - 100
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-10)
    np.testing.assert_allclose(stats.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-14)


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros((1, 7))), axis=1).data, 1 / 7, rtol=1e-15)
    s = ad.softmax(Tensor([[np.log(1), np.log(2), np.log(3)]]), axis=1).data
    np.testing.assert_allclose(s, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-12)


@given(arrays(np.float64, (3, 7), elements=st.floats(-1e3, 1e3)), st.floats(-1e3, 1e3))
def test_softmax_laws(x, c):
    s = ad.softmax(Tensor(x), axis=1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1, atol=1e-9)
    np.testing.assert_allclose(ad.softmax(Tensor(x + c), axis=1).data, s, atol=1e-12)


# surrogate -----------------------------------------------------------------------


def test_surrogate_forward_points():
    out = ad.surrogate_step(Tensor([-0.01, 0.0, 0.01])).data
    assert out.tolist() == [0.0, 1.0, 1.0]


def test_surrogate_backward_points():
    x = Parameter(np.array([0.0, 0.6]), "x", "spatial_only")
    with Tape():
        loss = ad.tensor_sum(ad.surrogate_step(x, 1.0))
    ad.backward(loss)
    assert x.grad.tolist() == [1.0, 0.0]


@given(arrays(np.float64, 20, elements=st.floats(-3, 3)), st.floats(0.1, 4))
def test_surrogate_is_binary_and_local(x, a):
    p = Parameter(x.copy(), "x", "spatial_only")
    with Tape():
        out = ad.surrogate_step(p, a)
        loss = ad.tensor_sum(out)
    assert set(np.unique(out.data)) <= {0.0, 1.0}
    ad.backward(loss)
    assert np.all(p.grad[np.abs(x) >= a / 2] == 0)


def test_surrogate_width_must_be_positive():
    with pytest.raises(ValueError):
        ad.surrogate_step(Tensor([0.0]), 0.0)


# tape contract -------------------------------------------------------------------


def test_linear_gradient_is_input():
    w = P(np.zeros((1, 3)))
    v = np.array([[1.0, 2.0, 3.0]])
    with Tape():
        loss = ad.tensor_sum(ad.linear(Tensor(v), w))
    ad.backward(loss)
    assert w.grad.tolist() == v.tolist()


def test_double_backward_is_error():
    w = P([2.0])
    with Tape():
        loss = ad.tensor_sum(ad.mul(w, 3.0))
    ad.backward(loss)
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_detached_loss_is_error():
    w = P([2.0])
    loss = ad.tensor_sum(ad.mul(w, 3.0))  # no tape active
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_non_scalar_loss_is_error():
    w = P([2.0, 1.0])
    with Tape():
        out = ad.mul(w, 3.0)
    with pytest.raises(ShapeError):
        ad.backward(out)


def test_untracked_tensors_untouched():
    w = P([1.0])
    c = Tensor([5.0])
    with Tape():
        loss = ad.tensor_sum(ad.mul(w, c))
    ad.backward(loss)
    assert c.grad is None and w.grad.tolist() == [5.0]


def test_parameter_group_fixed():
    p = P([1.0])
    with pytest.raises(AttributeError):
        p.group = "attention"
    with pytest.raises(ValueError):
        Parameter(np.zeros(1), "x", "nonsense")


def test_item_requires_single_element():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_repeat_is_bit_identical():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 6, 6))
    w0 = rng.normal(size=(3, 2, 3, 3))
    grads = []
    for _ in range(2):
        w = P(w0.copy())
        with Tape():
            loss = ad.tensor_sum(ad.mul(ad.conv2d(Tensor(x), w, stride=2), ad.conv2d(Tensor(x), w, stride=2)))
        ad.backward(loss)
        grads.append((loss.item(), w.grad.copy()))
    assert grads[0][0] == grads[1][0] and np.array_equal(grads[0][1], grads[1][1])


# composite gradient check --------------------------------------------------------


def test_composite_network_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3)) * 0.5
    b = rng.normal(size=4) * 0.1
    sc = rng.uniform(0.5, 1.5, 4)
    sh = rng.normal(size=4) * 0.3
    fw = rng.normal(size=(5, 4 * 9)) * 0.3
    fb = rng.normal(size=5) * 0.1
    y = np.eye(5)[[0, 2, 4]]
    arrays_ = [w, b, sc, sh, fw, fb]
    names = ["w", "b", "sc", "sh", "fw", "fb"]

    def forward(params):
        h = ad.conv2d(Tensor(x), params[0], params[1], stride=2)
        h = ad.batchnorm_relu(h, params[2], params[3], BatchNormStats(4), training=True)
        logits = ad.linear(ad.flatten(h), params[4], params[5])
        return ad.tensor_sum(ad.mul(ad.clamped_log(ad.softmax(logits, axis=1)), -y))

    params = [Parameter(a, n, "spatial_only") for a, n in zip(arrays_, names)]
    with Tape():
        loss = forward(params)
    ad.backward(loss)
    numeric = central_diff(lambda: forward([Tensor(a) for a in arrays_]).item(), arrays_)
    for p, g in zip(params, numeric):
        assert rel_error(p.grad, g) < 1e-4, p.name
