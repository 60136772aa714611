"""Estimator-style front end.

``fit`` learns the targets from the style image(s); ``transform`` optimizes a
generated image for each content image::

    model = StyleDifferenceTransfer(iterations=300).fit((serif, sans))
    new_glyph = model.transform(other_sans)
"""

from __future__ import annotations

import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .features import BackendDescriptor, get_backend
from .image_io import ImageTensor
from .losses import LossWeights, NstWeights
from .transfer import (
    DifferenceObjective,
    LossBreakdown,
    NstObjective,
    TransferConfig,
    _evaluate_at,
    _optimize,
    default_weights,
    init_generated,
)
from .validation import check_image, check_same_size


def _descriptor(backend) -> BackendDescriptor:
    if isinstance(backend, BackendDescriptor):
        return backend
    if backend == "tiny":
        return BackendDescriptor.tiny()
    if backend == "vgg":
        return BackendDescriptor()
    raise ValueError(f"backend must be 'vgg', 'tiny' or a BackendDescriptor, got {backend!r}")


def _as_list(X):
    if isinstance(X, (list, tuple)):
        return [check_image(x, "content") for x in X], True
    return [check_image(X, "content")], False


class _BaseTransfer(BaseEstimator):
    _mode = "difference"

    def _config(self) -> TransferConfig:
        desc = _descriptor(self.backend)
        weights = default_weights(desc, self.style_layers, self.content_layers)
        if self.style_weights is not None:
            weights.style = {k: float(v) for k, v in self.style_weights.items()}
        if self.content_weights is not None:
            weights.content = {k: float(v) for k, v in self.content_weights.items()}
        extra = {}
        if self._mode == "classic_nst":
            extra["nst_weights"] = NstWeights(self.alpha, self.beta)
        return TransferConfig(
            backend=desc,
            weights=LossWeights(weights.style, weights.content),
            mode=self._mode,
            iterations=self.iterations,
            optimizer=self.optimizer,
            init=self.init,
            seed=self.seed,
            snapshot_every=self.snapshot_every,
            pixel_projection=self.pixel_projection,
            learning_rate=self.learning_rate,
            early_stopping=self.early_stopping,
            precision=self.precision,
            **extra,
        )

    def _check_content(self, content: ImageTensor):
        h, w = self.image_size_
        if (content.height, content.width) != (h, w):
            raise ValueError(
                f"content image is {content.height}x{content.width} but the model was fitted on {h}x{w} images"
            )

    def transform(self, X):
        """Generate one image per content image. Accepts a single image or a sequence."""
        check_is_fitted(self, "objective_")
        contents, many = _as_list(X)
        self.results_ = []
        for content in contents:
            self._check_content(content)
            self.objective_.inverted = content.inverted
            self.objective_.set_content(content)
            start = init_generated(content, self.config_.init, self.config_.seed)
            self.results_.append(_optimize(self.objective_, start, self.config_))
        out = [r.generated for r in self.results_]
        return out if many else out[0]

    @property
    def result_(self):
        check_is_fitted(self, "results_")
        return self.results_[-1]


class StyleDifferenceTransfer(_BaseTransfer):
    """Transfer the difference between two style glyphs onto content glyphs.

    ``fit((style1, style2))`` stores the feature and Gram differences of the
    pair; ``transform(content)`` optimizes an image whose differences from
    ``content`` match them. Layer weights default to ``10^3 / N_l^2`` on the
    style layers and ``10^4`` on the content layer.
    """

    def __init__(
        self,
        backend="vgg",
        style_layers=None,
        content_layers=None,
        style_weights=None,
        content_weights=None,
        iterations=1000,
        optimizer="lbfgs",
        init="content",
        seed=0,
        snapshot_every=None,
        pixel_projection="clamp_final",
        learning_rate=1e-2,
        early_stopping=False,
        precision="float32",
    ):
        self.backend = backend
        self.style_layers = style_layers
        self.content_layers = content_layers
        self.style_weights = style_weights
        self.content_weights = content_weights
        self.iterations = iterations
        self.optimizer = optimizer
        self.init = init
        self.seed = seed
        self.snapshot_every = snapshot_every
        self.pixel_projection = pixel_projection
        self.learning_rate = learning_rate
        self.early_stopping = early_stopping
        self.precision = precision

    def fit(self, X, y=None):
        """``X`` is the pair ``(style1, style2)``; ``y`` is ignored."""
        if not isinstance(X, (list, tuple)) or len(X) != 2:
            raise ValueError("fit expects a pair (style1, style2)")
        s1 = check_image(X[0], "style1")
        s2 = check_image(X[1], "style2")
        h, w = check_same_size(style1=s1, style2=s2)
        cfg = self._config()
        backend = get_backend(cfg.backend, cfg.dtype)
        obj = DifferenceObjective(backend, cfg, s1.inverted, h, w)
        obj.set_style_pair(s1, s2)
        self.config_ = cfg
        self.image_size_ = (h, w)
        self.objective_ = obj
        return self

    def loss(self, content, candidate) -> LossBreakdown:
        """Difference losses of ``candidate`` relative to ``content``, without optimizing."""
        check_is_fitted(self, "objective_")
        content = check_image(content, "content")
        candidate = check_image(candidate, "candidate")
        self._check_content(content)
        self._check_content(candidate)
        self.objective_.set_content(content)
        with torch.no_grad():
            pixels = torch.from_numpy(candidate.pixels).to(self.config_.dtype)
            c, s, _ = _evaluate_at(self.objective_, pixels, candidate.inverted)
        c, s = float(c), float(s)
        return LossBreakdown(c, s, self.objective_.combine(c, s))


class NeuralStyleTransfer(_BaseTransfer):
    """Classic neural style transfer: ``alpha * content_loss + beta * style_loss``.

    ``fit(style)`` stores the style Grams; ``transform(content)`` optimizes.
    """

    _mode = "classic_nst"

    def __init__(
        self,
        backend="vgg",
        alpha=1.0,
        beta=1e3,
        style_layers=None,
        content_layers=None,
        style_weights=None,
        content_weights=None,
        iterations=1000,
        optimizer="lbfgs",
        init="content",
        seed=0,
        snapshot_every=None,
        pixel_projection="clamp_final",
        learning_rate=1e-2,
        early_stopping=False,
        precision="float32",
    ):
        self.backend = backend
        self.alpha = alpha
        self.beta = beta
        self.style_layers = style_layers
        self.content_layers = content_layers
        self.style_weights = style_weights
        self.content_weights = content_weights
        self.iterations = iterations
        self.optimizer = optimizer
        self.init = init
        self.seed = seed
        self.snapshot_every = snapshot_every
        self.pixel_projection = pixel_projection
        self.learning_rate = learning_rate
        self.early_stopping = early_stopping
        self.precision = precision

    def fit(self, X, y=None):
        style = check_image(X, "style")
        cfg = self._config()
        backend = get_backend(cfg.backend, cfg.dtype)
        obj = NstObjective(backend, cfg, style.inverted, style.height, style.width)
        obj.set_style(style)
        self.config_ = cfg
        self.image_size_ = (style.height, style.width)
        self.objective_ = obj
        return self
