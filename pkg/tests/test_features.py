import hashlib

import numpy as np
import pytest
import torch

from style_diff import features
from style_diff.features import (
    BackendDescriptor,
    WeightsUnavailableError,
    get_backend,
    list_layers,
    locate_weights,
)
from style_diff.image_io import ImageTensor, invert

DEFAULT_LAYERS = ["conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"]

# geometry-only VGG: seeded random weights, no download needed
VGG_GEOMETRY = BackendDescriptor(pretrained=False)


def test_vgg_layers_in_order():
    layers = list_layers(VGG_GEOMETRY)
    positions = [layers.index(name) for name in DEFAULT_LAYERS]
    assert positions == sorted(positions)
    assert list_layers(VGG_GEOMETRY) == layers


def test_vgg_channel_counts():
    counts = VGG_GEOMETRY.channel_counts
    assert [counts[n] for n in DEFAULT_LAYERS] == [64, 128, 256, 512, 512]


def test_vgg16_layers():
    desc = BackendDescriptor(depth=16, pretrained=False)
    assert "conv5_3" in desc.layer_names and "conv5_4" not in desc.layer_names
    assert len(desc.layer_names) == 13


def test_tiny_layers(tiny):
    assert list_layers(tiny) == ["conv1", "conv2", "conv3"]
    assert get_backend(tiny).list_layers() == ["conv1", "conv2", "conv3"]
    assert tiny.channel_counts == {"conv1": 8, "conv2": 16, "conv3": 16}


def test_descriptor_validation():
    with pytest.raises(ValueError):
        BackendDescriptor(kind="resnet")
    with pytest.raises(ValueError):
        BackendDescriptor(depth=11)
    with pytest.raises(ValueError):
        BackendDescriptor(pooling="median")


def test_preprocess_inverts_black_page(tiny):
    backend = get_backend(tiny)
    black = ImageTensor(np.zeros((4, 4, 1)))
    x = backend.preprocess(black)
    raw = x * backend._std_t + backend._mean_t
    assert x.shape == (3, 4, 4)
    assert torch.all(raw == 1.0)


def test_preprocess_normalizes_vgg():
    backend = get_backend(VGG_GEOMETRY)
    black = ImageTensor(np.zeros((2, 2, 1)))
    x = backend.preprocess(black)
    mean = torch.tensor(features.IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(features.IMAGENET_STD).view(3, 1, 1)
    torch.testing.assert_close(x, ((1.0 - mean) / std).expand(3, 2, 2))


def test_preprocess_no_double_inversion(tiny, rng):
    backend = get_backend(tiny)
    page = ImageTensor(rng.uniform(0, 1, (5, 5, 1)))
    assert torch.equal(backend.preprocess(page), backend.preprocess(invert(page)))


def test_preprocess_replicates_gray(tiny, rng):
    x = get_backend(tiny).preprocess(ImageTensor(rng.uniform(0, 1, (6, 7, 1))))
    assert x.shape == (3, 6, 7)
    assert torch.equal(x[0], x[1]) and torch.equal(x[1], x[2])


def test_vgg_conv1_2_shape_256():
    backend = get_backend(VGG_GEOMETRY)
    img = ImageTensor(np.ones((256, 256, 1)))
    with torch.no_grad():
        feats = backend.extract_features(img, ["conv1_2"])
    assert feats["conv1_2"].shape == (64, 256 * 256)
    assert backend.layer_shape("conv1_2", 256, 256) == (64, 65536)
    assert backend.layer_shape("conv4_2", 256, 256) == (512, 32 * 32)
    assert backend.layer_shape("conv5_2", 256, 256) == (512, 16 * 16)


def test_vgg_shape_law_all_layers():
    backend = get_backend(VGG_GEOMETRY)
    img = ImageTensor(np.random.default_rng(0).uniform(0, 1, (40, 40, 1)))
    with torch.no_grad():
        feats = backend.extract_features(img, DEFAULT_LAYERS)
    for name in DEFAULT_LAYERS:
        assert tuple(feats[name].shape) == backend.layer_shape(name, 40, 40)


def test_tiny_shapes_16(tiny, rng):
    # conv1 at 16x16, pool -> conv2 at 8x8, pool -> conv3 at 4x4
    expected = {"conv1": (8, 256), "conv2": (16, 64), "conv3": (16, 16)}
    backend = get_backend(tiny)
    img = ImageTensor(rng.uniform(0, 1, (16, 16, 1)))
    with torch.no_grad():
        feats = backend.extract_features(img, expected)
    for name, shape in expected.items():
        assert tuple(feats[name].shape) == shape
        assert torch.isfinite(feats[name]).all()
        assert backend.layer_shape(name, 16, 16) == shape


def test_features_deterministic(tiny, rng):
    backend = get_backend(tiny)
    img = ImageTensor(rng.uniform(0, 1, (16, 16, 1)))
    a = backend.extract_features(img, ["conv1", "conv3"])
    b = get_backend(BackendDescriptor.tiny()).extract_features(img.copy(), ["conv1", "conv3"])
    for name in a:
        assert torch.equal(a[name], b[name])


def test_tiny_weights_fixed_by_seed():
    a = features.FeatureBackend(BackendDescriptor.tiny(seed=3))
    b = features.FeatureBackend(BackendDescriptor.tiny(seed=3))
    c = features.FeatureBackend(BackendDescriptor.tiny(seed=4))
    assert torch.equal(a.net[0].weight, b.net[0].weight)
    assert not torch.equal(a.net[0].weight, c.net[0].weight)


def test_unknown_layer_lists_valid(tiny):
    backend = get_backend(tiny)
    with pytest.raises(ValueError, match="conv1, conv2, conv3"):
        backend.extract_features(ImageTensor(np.ones((8, 8, 1))), ["conv9"])


def test_features_differentiable_fd(tiny):
    """Gradient of a scalar function of the features vs central differences."""
    backend = get_backend(tiny, torch.float64)
    rng = np.random.default_rng(7)
    layers = ["conv1", "conv2", "conv3"]
    probes = {n: torch.from_numpy(rng.normal(size=backend.layer_shape(n, 16, 16))) for n in layers}

    def scalar(x):
        feats = backend.forward(backend.preprocess_tensor(x, False), layers)
        return sum((feats[n] * probes[n]).sum() + 0.1 * (feats[n] ** 2).sum() for n in layers)

    x0 = torch.from_numpy(rng.uniform(0, 1, (16, 16, 1))).requires_grad_(True)
    (grad,) = torch.autograd.grad(scalar(x0), x0)
    base = backend.activation_pattern(backend.preprocess_tensor(x0.detach(), False), layers)
    h, checked = 1e-3, 0
    for idx in rng.permutation(256):
        if checked == 20:
            break
        i, j = divmod(int(idx), 16)
        xp, xm = x0.detach().clone(), x0.detach().clone()
        xp[i, j, 0] += h
        xm[i, j, 0] -= h
        same = all(
            torch.equal(a, b)
            for y in (xp, xm)
            for a, b in zip(base, backend.activation_pattern(backend.preprocess_tensor(y, False), layers))
        )
        if not same:
            continue
        numeric = (float(scalar(xp)) - float(scalar(xm))) / (2 * h)
        analytic = float(grad[i, j, 0])
        assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic), 1e-12)
        checked += 1
    assert checked == 20


def test_locate_weights_verifies_checksum(tmp_path, monkeypatch):
    blob = tmp_path / "fake-vgg19.pth"
    blob.write_bytes(b"weights")
    prefix = hashlib.sha256(b"weights").hexdigest()[:8]
    monkeypatch.setitem(features.VGG_WEIGHTS, 19, (blob.name, "http://invalid/", prefix))
    desc = BackendDescriptor(weights_dir=str(tmp_path))
    assert locate_weights(desc, download=False) == blob

    monkeypatch.setitem(features.VGG_WEIGHTS, 19, (blob.name, "http://invalid/", "00000000"))
    with pytest.raises(WeightsUnavailableError, match="checksum"):
        locate_weights(desc, download=False)


def test_locate_weights_missing(tmp_path, monkeypatch):
    monkeypatch.setitem(features.VGG_WEIGHTS, 19, ("absent.pth", "http://invalid/", "abcd"))
    monkeypatch.setenv(features.WEIGHTS_ENV, str(tmp_path))
    with pytest.raises(WeightsUnavailableError):
        locate_weights(BackendDescriptor(), download=False)
    assert features.weights_dir() == tmp_path
