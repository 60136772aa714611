"""Gram matrices and the content/style losses, classic and difference-based.

All functions take ``{layer_name: tensor}`` mappings and stay differentiable
under torch autograd. Per-layer terms are accumulated in the order of the
weight mapping; layers with zero weight are skipped entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

LayerMap = dict[str, torch.Tensor]


@dataclass
class LossWeights:
    """Per-layer weights for the style (Gram) and content (feature) terms."""

    style: dict[str, float] = field(default_factory=dict)
    content: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for kind, weights in (("style", self.style), ("content", self.content)):
            for name, w in weights.items():
                if not w >= 0:
                    raise ValueError(f"{kind} weight for {name} must be >= 0, got {w}")
        self.style = {k: float(v) for k, v in self.style.items()}
        self.content = {k: float(v) for k, v in self.content.items()}

    @property
    def style_layers(self) -> list[str]:
        return [k for k, w in self.style.items() if w > 0]

    @property
    def content_layers(self) -> list[str]:
        return [k for k, w in self.content.items() if w > 0]

    def scaled(self, factor: float) -> LossWeights:
        return LossWeights(
            {k: v * factor for k, v in self.style.items()},
            {k: v * factor for k, v in self.content.items()},
        )

    def to_dict(self) -> dict:
        return {"style": dict(self.style), "content": dict(self.content)}


@dataclass(frozen=True)
class NstWeights:
    """Global content/style balance of classic neural style transfer."""

    alpha: float = 1.0
    beta: float = 1e3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("at least one of alpha, beta must be positive")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def gram(features) -> torch.Tensor:
    """Unnormalized Gram matrix ``D @ D.T`` of an ``N x M`` feature matrix."""
    d = _as_tensor(features)
    if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
        raise ValueError(f"features must be a non-empty N x M matrix, got shape {tuple(d.shape)}")
    if not torch.isfinite(d).all():
        raise FloatingPointError("non-finite values in feature matrix")
    return d @ d.T


def gram_set(features: LayerMap, layers=None) -> LayerMap:
    layers = features.keys() if layers is None else layers
    return {name: gram(features[name]) for name in layers}


def _pairwise(a: LayerMap, b: LayerMap, what: str) -> LayerMap:
    if set(a) != set(b):
        raise ValueError(f"{what}: layer sets differ ({sorted(a)} vs {sorted(b)})")
    out = {}
    for name in a:
        if a[name].shape != b[name].shape:
            raise ValueError(f"{what}: shape mismatch on {name}: {tuple(a[name].shape)} vs {tuple(b[name].shape)}")
        out[name] = a[name] - b[name]
    return out


def gram_difference(a: LayerMap, b: LayerMap) -> LayerMap:
    """Layerwise ``a - b`` of two Gram sets."""
    return _pairwise(a, b, "gram_difference")


def feature_difference(a: LayerMap, b: LayerMap) -> LayerMap:
    """Layerwise ``a - b`` of two feature sets."""
    return _pairwise(a, b, "feature_difference")


def _squared_error(x: torch.Tensor, y: torch.Tensor, name: str) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch on {name}: {tuple(x.shape)} vs {tuple(y.shape)}")
    return ((x - y) ** 2).sum()


def _zero_like(maps: LayerMap) -> torch.Tensor:
    for t in maps.values():
        return t.new_zeros(())
    return torch.zeros((), dtype=torch.float64)


def content_loss(gen: LayerMap, target: LayerMap, weights: LossWeights | dict) -> torch.Tensor:
    """``sum_l w_l / (2 N_l M_l) * ||F_gen - F_target||^2`` over content layers."""
    w = weights.content if isinstance(weights, LossWeights) else weights
    total = _zero_like(gen)
    for name, wl in w.items():
        if wl == 0:
            continue
        n, m = gen[name].shape
        total = total + wl / (2.0 * n * m) * _squared_error(gen[name], target[name], name)
    return total


def style_loss(gen_grams: LayerMap, target_grams: LayerMap, weights: LossWeights | dict, dims) -> torch.Tensor:
    """``sum_l w_l / (4 N_l^2 M_l^2) * ||G_gen - G_target||^2`` over style layers.

    ``dims`` maps each layer to its ``(N_l, M_l)``.
    """
    w = weights.style if isinstance(weights, LossWeights) else weights
    total = _zero_like(gen_grams)
    for name, wl in w.items():
        if wl == 0:
            continue
        n, m = dims[name]
        if gen_grams[name].shape != (n, n):
            raise ValueError(f"Gram for {name} has shape {tuple(gen_grams[name].shape)}, expected ({n}, {n})")
        total = total + wl / (4.0 * n * n * m * m) * _squared_error(gen_grams[name], target_grams[name], name)
    return total


def nst_total(content_term, style_term, w: NstWeights):
    return w.alpha * content_term + w.beta * style_term


def style_difference_loss(dg_gen: LayerMap, dg_style: LayerMap, weights: LossWeights | dict, dims) -> torch.Tensor:
    """Match the generated-minus-content Gram difference to the style1-minus-style2 one."""
    # same normalization as the classic style loss, applied to differences
    return style_loss(dg_gen, dg_style, weights, dims)


def content_difference_loss(df_gen: LayerMap, df_style: LayerMap, weights: LossWeights | dict) -> torch.Tensor:
    return content_loss(df_gen, df_style, weights)


def total_difference_loss(content_diff, style_diff):
    # plain sum: no global alpha/beta, balance comes from per-layer weights
    return content_diff + style_diff
