"""Convolutional feature backends.

Two backends map an image to named layer activations, each flattened to an
``N_l x M_l`` matrix (channels x spatial positions):

* ``vgg``: the convolutional part of VGG-19 (or VGG-16) with ImageNet weights.
* ``tiny``: three small convolutions with seeded random weights, used for
  fast, weight-free tests.

Layer features are taken after the rectifier that follows each convolution.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .image_io import ImageTensor

logger = logging.getLogger(__name__)

WEIGHTS_ENV = "STYLE_DIFF_WEIGHTS_DIR"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Conv channel plan per block; "M" marks 2x2 pooling.
_VGG_PLANS = {
    16: [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512],
    19: [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512],
}

# torchvision checkpoints: file name, url, sha256 prefix.
VGG_WEIGHTS = {
    16: ("vgg16-397923af.pth", "https://download.pytorch.org/models/vgg16-397923af.pth", "397923af"),
    19: ("vgg19-dcbb9e9d.pth", "https://download.pytorch.org/models/vgg19-dcbb9e9d.pth", "dcbb9e9d"),
}

TINY_CHANNELS = (8, 16, 16)
TINY_LAYERS = ("conv1", "conv2", "conv3")


class WeightsUnavailableError(RuntimeError):
    """Pretrained weights are neither cached nor downloadable."""


def _vgg_layers(plan):
    names, channels = [], {}
    block, idx = 1, 0
    for item in plan:
        if item == "M":
            block, idx = block + 1, 0
            continue
        idx += 1
        name = f"conv{block}_{idx}"
        names.append(name)
        channels[name] = item
    return tuple(names), channels


@dataclass(frozen=True)
class BackendDescriptor:
    """Hashable description of a feature backend.

    ``pretrained=False`` builds the VGG architecture with seeded random
    weights; only the layer geometry is meaningful then.
    """

    kind: str = "vgg"
    depth: int = 19
    pooling: str = "max"
    pretrained: bool = True
    seed: int = 0
    weights_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("vgg", "tiny"):
            raise ValueError(f"unknown backend kind {self.kind!r}; expected 'vgg' or 'tiny'")
        if self.kind == "vgg" and self.depth not in _VGG_PLANS:
            raise ValueError(f"VGG depth must be 16 or 19, got {self.depth}")
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")

    @property
    def layer_names(self) -> tuple[str, ...]:
        if self.kind == "tiny":
            return TINY_LAYERS
        return _vgg_layers(_VGG_PLANS[self.depth])[0]

    @property
    def channel_counts(self) -> dict[str, int]:
        if self.kind == "tiny":
            return dict(zip(TINY_LAYERS, TINY_CHANNELS))
        return _vgg_layers(_VGG_PLANS[self.depth])[1]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "depth": self.depth,
            "pooling": self.pooling,
            "pretrained": self.pretrained,
            "seed": self.seed,
            "weights_dir": self.weights_dir,
        }

    @classmethod
    def tiny(cls, seed: int = 0) -> BackendDescriptor:
        return cls(kind="tiny", depth=0, pooling="avg", pretrained=False, seed=seed)


def weights_dir(descriptor: BackendDescriptor | None = None) -> Path:
    if descriptor is not None and descriptor.weights_dir:
        return Path(descriptor.weights_dir).expanduser()
    env = os.environ.get(WEIGHTS_ENV)
    if env:
        return Path(env).expanduser()
    return Path.home() / ".cache" / "style_diff" / "weights"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@functools.lru_cache(maxsize=None)
def _verified(path: str, prefix: str) -> bool:
    return _sha256(Path(path)).startswith(prefix)


def locate_weights(descriptor: BackendDescriptor, download: bool = True) -> Path:
    """Return the path of the checksum-verified VGG checkpoint, fetching it once if needed."""
    fname, url, prefix = VGG_WEIGHTS[descriptor.depth]
    cache = weights_dir(descriptor)
    torch_cache = Path(torch.hub.get_dir()) / "checkpoints"
    for cand in (cache / fname, torch_cache / fname):
        if cand.is_file():
            if not _verified(str(cand), prefix):
                raise WeightsUnavailableError(f"checksum mismatch for {cand} (expected sha256 prefix {prefix})")
            return cand
    if download:
        cache.mkdir(parents=True, exist_ok=True)
        target = cache / fname
        try:
            logger.info("downloading %s to %s", url, target)
            torch.hub.download_url_to_file(url, str(target), hash_prefix=prefix, progress=False)
            return target
        except Exception as exc:  # network errors come in many types
            if target.exists():
                target.unlink()
            raise WeightsUnavailableError(
                f"VGG-{descriptor.depth} weights not cached and download failed ({exc}). "
                f"Place {fname} (sha256 prefix {prefix}) in {cache} or set {WEIGHTS_ENV}."
            ) from exc
    raise WeightsUnavailableError(f"VGG-{descriptor.depth} weights not found in {cache}")


def pretrained_available(depth: int = 19) -> bool:
    try:
        locate_weights(BackendDescriptor(depth=depth), download=False)
    except WeightsUnavailableError:
        return False
    return True


def _build_vgg(descriptor: BackendDescriptor) -> nn.Sequential:
    layers = []
    in_ch = 3
    for item in _VGG_PLANS[descriptor.depth]:
        if item == "M":
            pool = nn.MaxPool2d(2, 2) if descriptor.pooling == "max" else nn.AvgPool2d(2, 2)
            layers.append(pool)
        else:
            layers += [nn.Conv2d(in_ch, item, 3, padding=1), nn.ReLU(inplace=False)]
            in_ch = item
    net = nn.Sequential(*layers)
    if descriptor.pretrained:
        path = locate_weights(descriptor)
        state = torch.load(path, map_location="cpu", weights_only=True)
        feats = {k[len("features.") :]: v for k, v in state.items() if k.startswith("features.")}
        net.load_state_dict(feats)
    else:
        gen = torch.Generator().manual_seed(descriptor.seed)
        for mod in net:
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_uniform_(mod.weight, nonlinearity="relu", generator=gen)
                nn.init.zeros_(mod.bias)
    return net


def _build_tiny(descriptor: BackendDescriptor) -> nn.Sequential:
    rng = np.random.default_rng(descriptor.seed)
    layers = []
    in_ch = 3
    for i, out_ch in enumerate(TINY_CHANNELS):
        if i > 0:
            layers.append(nn.AvgPool2d(2, 2) if descriptor.pooling == "avg" else nn.MaxPool2d(2, 2))
        conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        bound = np.sqrt(6.0 / (in_ch * 9))
        with torch.no_grad():
            conv.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, conv.weight.shape)))
            conv.bias.copy_(torch.from_numpy(rng.uniform(-0.1, 0.1, conv.bias.shape)))
        layers += [conv, nn.ReLU(inplace=False)]
        in_ch = out_ch
    return nn.Sequential(*layers)


class FeatureBackend:
    """A frozen, evaluation-mode network that returns named layer features.

    Build instances with :func:`get_backend`, which caches them per
    descriptor and dtype.
    """

    def __init__(self, descriptor: BackendDescriptor, dtype: torch.dtype = torch.float32):
        self.descriptor = descriptor
        self.dtype = dtype
        net = _build_tiny(descriptor) if descriptor.kind == "tiny" else _build_vgg(descriptor)
        net = net.to(dtype).eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        # Index of the rectifier whose output is reported for each conv layer.
        self._taps = {}
        names = iter(descriptor.layer_names)
        for i, mod in enumerate(net):
            if isinstance(mod, nn.Conv2d):
                self._taps[next(names)] = i + 1
        if descriptor.kind == "vgg":
            self.mean, self.std = IMAGENET_MEAN, IMAGENET_STD
        else:
            self.mean, self.std = (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)
        self._mean_t = torch.tensor(self.mean, dtype=dtype).view(3, 1, 1)
        self._std_t = torch.tensor(self.std, dtype=dtype).view(3, 1, 1)

    def __repr__(self):
        return f"FeatureBackend({self.descriptor!r}, dtype={self.dtype})"

    @property
    def layer_names(self) -> tuple[str, ...]:
        return self.descriptor.layer_names

    @property
    def channel_counts(self) -> dict[str, int]:
        return self.descriptor.channel_counts

    def list_layers(self) -> list[str]:
        return list(self.layer_names)

    def check_layers(self, layers) -> None:
        unknown = [name for name in layers if name not in self._taps]
        if unknown:
            raise ValueError(f"unknown layer(s) {unknown}; valid layers: {', '.join(self.layer_names)}")

    def layer_shape(self, layer: str, height: int, width: int) -> tuple[int, int]:
        """``(N_l, M_l)`` of ``layer`` for an input of the given size."""
        self.check_layers([layer])
        h, w = height, width
        for mod in self.net[: self._taps[layer]]:
            if isinstance(mod, (nn.MaxPool2d, nn.AvgPool2d)):
                h, w = h // 2, w // 2
        return self.channel_counts[layer], h * w

    def preprocess_tensor(self, pixels: torch.Tensor, inverted: bool) -> torch.Tensor:
        """Differentiable preprocessing of an ``H x W x C`` pixel tensor to ``3 x H x W``.

        Order: invert (unless already inverted), replicate gray to 3
        channels, then normalize with the backend's mean and std.
        """
        # invert at input precision so a pre-inverted page maps identically
        x = pixels if inverted else 1.0 - pixels
        x = x.to(self.dtype)
        x = x.permute(2, 0, 1)
        if x.shape[0] == 1:
            x = x.expand(3, -1, -1)
        return (x - self._mean_t) / self._std_t

    def preprocess(self, img: ImageTensor) -> torch.Tensor:
        return self.preprocess_tensor(torch.from_numpy(img.pixels), img.inverted)

    def forward(self, x: torch.Tensor, layers) -> dict[str, torch.Tensor]:
        """Run a preprocessed ``3 x H x W`` tensor and collect ``N_l x M_l`` features."""
        layers = list(layers)
        self.check_layers(layers)
        wanted = {self._taps[name]: name for name in layers}
        stop = max(wanted)
        out = {}
        h = x.unsqueeze(0)
        for i, mod in enumerate(self.net):
            if i >= stop:
                break
            h = mod(h)
            if i + 1 in wanted:
                out[wanted[i + 1]] = h[0].reshape(h.shape[1], -1)
        return {name: out[name] for name in layers}

    def activation_pattern(self, x: torch.Tensor, layers) -> list[torch.Tensor]:
        """Rectifier on/off masks and max-pool argmax indices up to the deepest of ``layers``.

        The network is piecewise smooth; two inputs with equal patterns lie
        on the same smooth piece.
        """
        stop = max(self._taps[name] for name in layers)
        pattern = []
        h = x.unsqueeze(0)
        with torch.no_grad():
            for mod in self.net[:stop]:
                if isinstance(mod, nn.ReLU):
                    pattern.append(h > 0)
                elif isinstance(mod, nn.MaxPool2d):
                    pattern.append(nn.functional.max_pool2d(h, 2, 2, return_indices=True)[1])
                h = mod(h)
        return pattern

    def extract_features(self, img: ImageTensor, layers) -> dict[str, torch.Tensor]:
        return self.forward(self.preprocess(img), layers)


@functools.lru_cache(maxsize=8)
def _cached_backend(descriptor: BackendDescriptor, dtype: torch.dtype) -> FeatureBackend:
    return FeatureBackend(descriptor, dtype)


def get_backend(descriptor: BackendDescriptor | str = "vgg", dtype=torch.float32) -> FeatureBackend:
    """Return a (cached) backend for ``descriptor``; a string selects the default of that kind."""
    if isinstance(descriptor, str):
        descriptor = BackendDescriptor.tiny() if descriptor == "tiny" else BackendDescriptor(kind=descriptor)
    return _cached_backend(descriptor, dtype)


def list_layers(backend) -> list[str]:
    if isinstance(backend, BackendDescriptor):
        return list(backend.layer_names)
    return backend.list_layers()


def preprocess(img: ImageTensor, backend: FeatureBackend | None = None) -> torch.Tensor:
    backend = backend or get_backend()
    return backend.preprocess(img)


def extract_features(backend: FeatureBackend, img: ImageTensor, layers) -> dict[str, torch.Tensor]:
    """Named ``N_l x M_l`` features of ``img``; differentiable w.r.t. the input pixels."""
    return backend.extract_features(img, layers)
