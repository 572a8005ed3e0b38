import numpy as np
import pytest
from PIL import Image

from shapebias import autodiff as ad
from shapebias.errors import DimensionError
from shapebias.model import NetworkConfig, build_network
from shapebias.saliency import (
    SaliencyMap,
    aggregate_channels,
    grad_map,
    map_distance,
    raw_grad,
    raw_smoothgrad,
    render_map,
    render_montage,
    smoothgrad_map,
)


class SoftmaxLinear:
    def __init__(self, w):
        self.w = np.asarray(w, dtype=float)
        self.class_count = self.w.shape[1]

    def __call__(self, x):
        return ad.dense(ad.flatten(x), ad.Tensor(self.w), ad.Tensor(np.zeros(self.class_count)))


class PooledLinear:
    """Global average pool then a dense layer: invariant to translations."""

    class_count = 2

    def __init__(self):
        self.w = np.array([[1.0, -2.0], [0.5, 0.0], [-1.0, 3.0]])

    def __call__(self, x):
        return ad.dense(ad.global_avg_pool(x), ad.Tensor(self.w), ad.Tensor(np.zeros(2)))


def _linear_case(seed=0, h=3, w=3):
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=(3 * h * w, 2)) * 0.5
    image = rng.uniform(0, 1, (h, w, 3))
    return SoftmaxLinear(weights), image, weights


def test_grad_closed_form_softmax_linear():
    model, image, w = _linear_case()
    z = image.transpose(2, 0, 1).reshape(-1) @ w
    p0 = np.exp(z[0]) / np.exp(z).sum()
    expected = ((1 - p0) * (w[:, 0] - w[:, 1])).reshape(3, 3, 3)
    assert np.max(np.abs(raw_grad(model, image, 0) - expected)) < 1e-10


def test_grad_matches_finite_differences_on_micro_net():
    net = build_network(NetworkConfig(input_size=(3, 8, 8), stages=((4, 1),), class_count=3, seed=2))
    rng = np.random.default_rng(0)
    for t in net.parameters.values():  # fresh nets start with zero logits
        t.data = rng.normal(scale=0.3, size=t.shape)
    image = np.random.default_rng(1).uniform(0, 1, (8, 8, 3))

    def score(t):
        x = ad.Tensor(t.data.transpose(2, 0, 1)[None])
        return ad.log_softmax(net(x)).data[0, 1]

    fd = ad.finite_difference_gradient(score, ad.Tensor(image)).transpose(2, 0, 1)
    g = raw_grad(net, image, 1)
    rel = np.abs(g - fd) / np.maximum(1e-6, np.abs(g) + np.abs(fd))
    assert rel.max() < 1e-4


def test_constant_image_under_pooled_model_has_equal_attributions():
    g = raw_grad(PooledLinear(), np.full((4, 4, 3), 0.3), 0)
    for c in range(3):
        assert np.all(g[c] == g[c, 0, 0])


def test_class_out_of_range():
    model, image, _ = _linear_case()
    with pytest.raises(IndexError):
        raw_grad(model, image, 2)
    with pytest.raises(IndexError):
        grad_map(model, image, -1)


def test_smoothgrad_sigma_zero_is_grad_bitwise():
    model, image, _ = _linear_case(1)
    for n in (1, 7, 100):
        assert np.array_equal(smoothgrad_map(model, image, 1, n=n, sigma_rel=0.0).values,
                              grad_map(model, image, 1).values)


def test_smoothgrad_constant_image_is_grad():
    model = PooledLinear()
    image = np.full((4, 4, 3), 0.7)
    assert np.array_equal(raw_smoothgrad(model, image, 0, n=5, sigma_rel=0.1), raw_grad(model, image, 0))


def test_smoothgrad_reproducible_for_fixed_seed():
    model, image, _ = _linear_case(2)
    a = smoothgrad_map(model, image, 0, n=1, seed=3)
    b = smoothgrad_map(model, image, 0, n=1, seed=3)
    assert np.array_equal(a.values, b.values)
    assert a.provenance == dict(model_id="", method="smoothgrad", c=0, n=1, sigma=0.1)


def test_smoothgrad_expectation_matches_quadrature():
    # For two classes the gradient of log p0 is (1 - p0)(w0 - w1). With Gaussian
    # noise, (w0 - w1) . noise is a scalar Gaussian, so the expected gradient is a
    # one-dimensional Gauss-Hermite integral.
    model, image, w = _linear_case(3, h=2, w=2)
    d = w[:, 0] - w[:, 1]
    sigma = 0.1 * (image.max() - image.min())
    m0 = image.transpose(2, 0, 1).reshape(-1) @ d
    s = sigma * np.linalg.norm(d)
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    q = 1.0 / (1.0 + np.exp(m0 + s * nodes))  # 1 - p0 as a function of the margin
    mean_q = np.sum(weights * q) / np.sqrt(2 * np.pi)
    var_q = np.sum(weights * q**2) / np.sqrt(2 * np.pi) - mean_q**2

    n = 2000
    est = raw_smoothgrad(model, image, 0, n=n, sigma_rel=0.1, seed=11).reshape(-1)
    bound = 3 * np.sqrt(var_q / n) * np.abs(d)
    assert np.all(np.abs(est - mean_q * d) <= bound)


def test_aggregate_channels_by_hand():
    raw = np.zeros((3, 2, 2))
    raw[0, 0, 0], raw[1, 0, 0] = 0.25, -0.25
    raw[2, 1, 1] = 0.125
    out = aggregate_channels(raw)
    assert out.tolist() == [[1.0, 0.0], [0.0, 0.25]]


def test_aggregate_zero_map_and_scale_invariance():
    assert np.array_equal(aggregate_channels(np.zeros((3, 4, 4))), np.zeros((4, 4)))
    raw = np.random.default_rng(0).normal(size=(3, 5, 5))
    np.testing.assert_allclose(aggregate_channels(7.5 * raw), aggregate_channels(raw), rtol=1e-15)
    with pytest.raises(DimensionError):
        aggregate_channels(np.zeros((4, 4)))


def test_map_distance_properties():
    zeros, ones = SaliencyMap(np.zeros((4, 4))), SaliencyMap(np.ones((4, 4)))
    assert map_distance(zeros, zeros) == 0.0
    assert map_distance(zeros, ones) == 1.0
    assert map_distance(zeros, ones, "rms") == 1.0
    rng = np.random.default_rng(1)
    a, b = SaliencyMap(rng.random((5, 5))), SaliencyMap(rng.random((5, 5)))
    assert map_distance(a, b) == map_distance(b, a)
    with pytest.raises(DimensionError):
        map_distance(a, SaliencyMap(np.zeros((4, 4))))
    with pytest.raises(ValueError):
        map_distance(a, b, "cosine")


def test_render_map_bytes(tmp_path):
    m = SaliencyMap(np.array([[0.0, 1.0], [0.5, 0.2]]))
    render_map(m, tmp_path / "m.png")
    img = Image.open(tmp_path / "m.png")
    assert img.mode == "L"
    assert np.asarray(img).tolist() == [[0, 255], [128, 51]]
    render_map(SaliencyMap(np.zeros((3, 3))), tmp_path / "z.png")
    assert np.asarray(Image.open(tmp_path / "z.png")).max() == 0


def test_montage_layout(tmp_path):
    image = np.random.default_rng(0).random((4, 4, 3))
    render_montage(image, [SaliencyMap(np.ones((4, 4)))] * 2, tmp_path / "strip.png")
    assert np.asarray(Image.open(tmp_path / "strip.png")).shape == (4, 4 * 3 + 2 * 2, 3)
