import numpy as np
import pytest

from shapebias import autodiff as ad
from shapebias.autodiff import Tape, Tensor, backward, finite_difference_gradient
from shapebias.errors import ConfigurationError, DimensionError, StateError


def loop_conv(x, k, b, stride, pad):
    """Direct nested-loop convolution used as an independent oracle."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(n):
        for o in range(f):
            for r in range(oh):
                for s in range(ow):
                    patch = xp[i, :, r * stride : r * stride + kh, s * stride : s * stride + kw]
                    out[i, o, r, s] = np.sum(patch * k[o]) + b[o]
    return out


def grad_of(fn, *tensors):
    with Tape() as tape:
        out = fn(*tensors)
    return backward(tape, out)


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 6)) if stride == 1 else rng.normal(size=(2, 3, 7, 7))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, loop_conv(x, k, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_box_filter_by_hand():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.5]))
    # windows: 0+1+3+4, 1+2+4+5, 3+4+6+7, 4+5+7+8
    assert out.data.ravel().tolist() == [8.5, 12.5, 20.5, 24.5]


def test_conv2d_gradients_against_finite_differences():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    w = rng.normal(size=(2, 3, 5, 5))

    def f(xx, kk, bb):
        return ad.sum_all(ad.mul(ad.conv2d(xx, kk, bb, 1, 1), Tensor(w)))

    g = grad_of(f, x, k, b)
    assert rel_err(g[x], finite_difference_gradient(lambda t: f(t, k, b), x)) < 1e-6
    assert rel_err(g[k], finite_difference_gradient(lambda t: f(x, t, b), k)) < 1e-6
    assert rel_err(g[b], finite_difference_gradient(lambda t: f(x, k, t), b)) < 1e-6


def test_conv2d_errors_name_the_axis():
    with pytest.raises(DimensionError, match="channel"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(DimensionError, match="height"):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 4))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ConfigurationError):
        ad.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2)


def test_max_pool_values_and_tie_routing():
    x = Tensor(np.array([[[[1.0, 3.0, 2.0, 2.0], [0.0, 2.0, 2.0, 2.0]]]]), requires_grad=True)
    g = grad_of(lambda t: ad.sum_all(ad.max_pool2(t)), x)
    assert ad.max_pool2(x).data.ravel().tolist() == [3.0, 2.0]
    # a tie sends the whole gradient to the first maximum in row-major order
    assert g[x].ravel().tolist() == [0, 1, 1, 0, 0, 0, 0, 0]


def test_max_pool_odd_size_rejected():
    with pytest.raises(ConfigurationError):
        ad.max_pool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_relu_pool_dense_chain_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    y = np.array([0, 3, 1])

    def f(xx, ww, bb):
        h = ad.global_avg_pool(ad.max_pool2(ad.relu(xx)))
        return ad.cross_entropy(ad.log_softmax(ad.dense(h, ww, bb)), y)

    g = grad_of(f, x, w, b)
    assert rel_err(g[w], finite_difference_gradient(lambda t: f(x, t, b), w)) < 1e-6
    assert rel_err(g[b], finite_difference_gradient(lambda t: f(x, w, t), b)) < 1e-6
    assert rel_err(g[x], finite_difference_gradient(lambda t: f(t, w, b), x)) < 1e-5


def test_log_softmax_is_stable_for_huge_logits():
    lp = ad.log_softmax(Tensor([[1000.0, 0.0], [-1000.0, -1000.0]])).data
    assert np.all(np.isfinite(lp))
    assert lp[0, 0] == 0.0
    np.testing.assert_allclose(lp[1], np.log([0.5, 0.5]))


def test_log_softmax_needs_two_classes():
    with pytest.raises(DimensionError):
        ad.log_softmax(Tensor([[1.0]]))


def test_cross_entropy_is_mean_negative_log_likelihood():
    lp = np.log(np.array([[0.25, 0.75], [0.5, 0.5]]))
    loss = ad.cross_entropy(Tensor(lp), [1, 0]).item()
    assert loss == pytest.approx(-(np.log(0.75) + np.log(0.5)) / 2, abs=1e-15)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_pick_gathers_and_scatters():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        out = ad.pick(x, [2, 0])
        total = ad.sum_all(out)
    assert out.data.tolist() == [2.0, 3.0]
    assert backward(tape, total)[x].tolist() == [[0, 0, 1], [1, 0, 0]]


def test_add_mismatch_names_axis():
    with pytest.raises(DimensionError, match="axis 1"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def test_tape_is_single_use():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    assert backward(tape, loss)[x].tolist() == [2.0, 4.0]
    with pytest.raises(StateError):
        backward(tape, loss)


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(DimensionError):
        backward(tape, y)
    with Tape() as other:
        z = ad.sum_all(x)
    with Tape() as tape2:
        ad.sum_all(ad.scale(x, 3.0))
    with pytest.raises(StateError):
        backward(tape2, z)
    assert len(other) == 1


def test_unrelated_leaf_gets_zero_gradient():
    a = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(a)
    g = backward(tape, loss)
    assert np.array_equal(g[unused], np.zeros((2, 2)))


def test_no_recording_without_tape_or_grad():
    x = Tensor([1.0])
    with Tape() as tape:
        ad.relu(x)
    assert len(tape) == 0


def test_finite_difference_of_quadratic():
    x = Tensor([1.0, -2.0, 0.5])
    g = finite_difference_gradient(lambda t: float(np.sum(t.data**2)), x)
    np.testing.assert_allclose(g, [2.0, -4.0, 1.0], atol=1e-8)
    with pytest.raises(ConfigurationError):
        finite_difference_gradient(lambda t: 0.0, x, step=0.0)
