import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sonarmatch.errors import UnknownLayerError
from sonarmatch.features import ConvStackExtractor, ConvStage, VGG19Extractor, gram, tiny_extractor
from sonarmatch.imgcore import Image


def loop_gram(f):
    n, m = f.shape
    g = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            for k in range(m):
                g[i, j] += f[i, k] * f[j, k]
    return g


def test_gram_examples():
    np.testing.assert_array_equal(gram(np.array([[1.0, 2.0]])), [[5.0]])
    np.testing.assert_array_equal(gram(np.zeros((3, 4))), np.zeros((3, 3)))
    np.testing.assert_array_equal(gram(np.eye(2)), np.eye(2))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-10, 10)))
def test_gram_matches_double_loop(f):
    np.testing.assert_allclose(gram(f), loop_gram(f), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 10_000))
def test_gram_symmetric_psd(n, m, seed):
    f = np.random.default_rng(seed).normal(size=(n, m))
    g = gram(f)
    np.testing.assert_array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-8


def test_zero_image_through_bias_free_extractor():
    ex = tiny_extractor(0, bias=False)
    acts = ex.extract(Image.rgb(np.zeros((16, 16, 3))), ex.layer_names)
    for name in ex.layer_names:
        assert not acts[name].any()


def test_extract_deterministic_and_shapes():
    ex = tiny_extractor(3)
    img = Image.rgb(np.random.default_rng(0).random((20, 24, 3)))
    a1 = ex.extract(img, ["conv1", "conv2"])
    a2 = ex.extract(img, ["conv1", "conv2"])
    for k in a1:
        np.testing.assert_array_equal(a1[k], a2[k])
    assert a1["conv1"].shape == (8, 20 * 24)
    assert a1["conv2"].shape == (16, 10 * 12)


def test_unknown_layer():
    with pytest.raises(UnknownLayerError):
        tiny_extractor(0).extract(Image.rgb(np.zeros((8, 8, 3))), ["conv9"])


def test_single_conv_matches_hand_convolution():
    kernel = np.array([[1.0, 0.0, -1.0], [2.0, 0.5, -2.0], [0.0, 1.0, 0.0]])
    ex = ConvStackExtractor([ConvStage("c", torch.from_numpy(kernel[None, None]), None, "linear")])
    img = np.arange(16, dtype=float).reshape(4, 4) / 16.0
    padded = np.pad(img, 1)
    expected = np.zeros((4, 4))
    for r in range(4):
        for c in range(4):
            expected[r, c] = (padded[r : r + 3, c : c + 3] * kernel).sum()
    acts = ex.extract(img[:, :, None], ["c"])
    np.testing.assert_allclose(acts["c"], expected.reshape(1, 16), atol=1e-12)


def finite_difference(fn, x, idx, eps=1e-6):
    out = []
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        out.append((fn(xp) - fn(xm)) / (2 * eps))
    return np.array(out)


def test_reverse_is_adjoint_of_forward():
    ex = tiny_extractor(1)
    rng = np.random.default_rng(4)
    x = rng.random((12, 12, 3))
    upstream = {
        "conv1": rng.normal(size=(8, 144)),
        "conv2": rng.normal(size=(16, 36)),
    }

    def scalar(px):
        acts = ex.extract(px, list(upstream))
        return sum(float((acts[k] * upstream[k]).sum()) for k in upstream)

    grad = ex.reverse(x, upstream)
    idx = np.arange(x.size)
    fd = finite_difference(scalar, x, idx)
    rel = np.linalg.norm(grad.ravel() - fd) / np.linalg.norm(fd)
    assert rel <= 1e-3


def test_vgg19_layer_names_and_shapes():
    ex = VGG19Extractor(weights_path=None)
    acts = ex.extract(Image.rgb(np.full((32, 32, 3), 0.5)), ["conv1_1", "conv4_2"])
    assert acts["conv1_1"].shape == (64, 32 * 32)
    assert acts["conv4_2"].shape == (512, 4 * 4)
    assert (acts["conv1_1"] >= 0).all()


def test_vgg19_loads_local_state_dict(tmp_path):
    from torchvision.models import vgg19

    torch.manual_seed(7)
    model = vgg19(weights=None)
    path = tmp_path / "vgg.pth"
    torch.save(model.state_dict(), path)
    ex = VGG19Extractor(weights_path=path, pool="max")
    np.testing.assert_array_equal(ex.net[0].weight.numpy(), model.features[0].weight.detach().numpy())
