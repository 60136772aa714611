"""Optimization of the generated image.

The generated image is optimized directly in pixel space. Fixed images
(content, style pair) go through the network once; every optimizer
evaluation then costs one forward/backward pass on the generated image.
"""

from __future__ import annotations

import hashlib
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from . import losses
from .features import BackendDescriptor, FeatureBackend, get_backend
from .image_io import ImageTensor
from .losses import LossWeights, NstWeights
from .validation import check_choice, check_image, check_positive_int, check_same_size

DEFAULT_STYLE_LAYERS = ("conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2")
DEFAULT_CONTENT_LAYER = "conv4_2"
STYLE_WEIGHT_SCALE = 1e3
CONTENT_WEIGHT = 1e4

TINY_STYLE_LAYERS = ("conv1", "conv2", "conv3")
TINY_CONTENT_LAYER = "conv2"

MODES = ("difference", "classic_nst")
OPTIMIZERS = ("lbfgs", "first_order")
INITS = ("content", "random")
PROJECTIONS = ("none", "clamp_each_step", "clamp_final")
PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


class NumericalError(FloatingPointError):
    """Non-finite loss during optimization."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


def style_weight_for(descriptor: BackendDescriptor, layer: str) -> float:
    """``10^3 / N_l^2``, the per-layer style weight used by default."""
    n = descriptor.channel_counts[layer]
    return STYLE_WEIGHT_SCALE / n**2


def default_weights(descriptor: BackendDescriptor, style_layers=None, content_layers=None) -> LossWeights:
    if descriptor.kind == "tiny":
        style_layers = TINY_STYLE_LAYERS if style_layers is None else style_layers
        content_layers = (TINY_CONTENT_LAYER,) if content_layers is None else content_layers
    else:
        style_layers = DEFAULT_STYLE_LAYERS if style_layers is None else style_layers
        content_layers = (DEFAULT_CONTENT_LAYER,) if content_layers is None else content_layers
    unknown = [n for n in (*style_layers, *content_layers) if n not in descriptor.layer_names]
    if unknown:
        raise ValueError(f"unknown layer(s) {unknown}; valid layers: {', '.join(descriptor.layer_names)}")
    return LossWeights(
        {name: style_weight_for(descriptor, name) for name in style_layers},
        {name: CONTENT_WEIGHT for name in content_layers},
    )


@dataclass
class TransferConfig:
    backend: BackendDescriptor = field(default_factory=BackendDescriptor)
    weights: LossWeights | None = None
    mode: str = "difference"
    nst_weights: NstWeights = field(default_factory=NstWeights)
    iterations: int = 1000
    optimizer: str = "lbfgs"
    init: str = "content"
    seed: int = 0
    snapshot_every: int | None = None
    pixel_projection: str = "clamp_final"
    lbfgs_history: int = 20
    lbfgs_max_eval: int = 25
    learning_rate: float = 1e-2
    early_stopping: bool = False
    early_stop_tol: float = 1e-7
    early_stop_window: int = 10
    precision: str = "float32"

    def __post_init__(self):
        if self.weights is None:
            self.weights = default_weights(self.backend)
        check_choice(self.mode, MODES, "mode")
        check_choice(self.optimizer, OPTIMIZERS, "optimizer")
        check_choice(self.init, INITS, "init")
        check_choice(self.pixel_projection, PROJECTIONS, "pixel_projection")
        check_choice(self.precision, PRECISIONS, "precision")
        check_positive_int(self.iterations, "iterations")
        if self.snapshot_every is not None and self.snapshot_every < 0:
            raise ValueError("snapshot_every must be >= 0 or None")
        valid = set(self.backend.layer_names)
        unknown = [n for n in (*self.weights.style, *self.weights.content) if n not in valid]
        if unknown:
            raise ValueError(f"unknown layer(s) {unknown}; valid layers: {', '.join(self.backend.layer_names)}")
        if not self.weights.style_layers and not self.weights.content_layers:
            raise ValueError("at least one layer must carry a positive weight")

    @property
    def style_layers(self) -> list[str]:
        return self.weights.style_layers

    @property
    def content_layers(self) -> list[str]:
        return self.weights.content_layers

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return {
            "backend": self.backend.to_dict(),
            "weights": self.weights.to_dict(),
            "mode": self.mode,
            "nst_weights": {"alpha": self.nst_weights.alpha, "beta": self.nst_weights.beta},
            "iterations": self.iterations,
            "optimizer": self.optimizer,
            "init": self.init,
            "seed": self.seed,
            "snapshot_every": self.snapshot_every,
            "pixel_projection": self.pixel_projection,
            "lbfgs_history": self.lbfgs_history,
            "lbfgs_max_eval": self.lbfgs_max_eval,
            "learning_rate": self.learning_rate,
            "early_stopping": self.early_stopping,
            "early_stop_tol": self.early_stop_tol,
            "early_stop_window": self.early_stop_window,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TransferConfig:
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown transfer field(s): {sorted(extra)}")
        backend = BackendDescriptor(**data.pop("backend", {}))
        weights = data.pop("weights", None)
        if weights is not None:
            weights = LossWeights(weights.get("style", {}), weights.get("content", {}))
        nst = data.pop("nst_weights", None)
        nst = NstWeights(**nst) if nst is not None else NstWeights()
        return cls(backend=backend, weights=weights, nst_weights=nst, **data)


class LossBreakdown(NamedTuple):
    content: float
    style: float
    total: float


@dataclass
class TransferResult:
    generated: ImageTensor
    loss_trace: list[tuple[int, float, float, float]]
    snapshots: list[tuple[int, ImageTensor]] = field(default_factory=list)
    wall_time: float = 0.0
    n_evaluations: int = 0

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0][3]

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1][3]

    def trace_csv(self, header=("iteration", "content_diff", "style_diff", "total")) -> str:
        lines = [",".join(header)]
        lines += [f"{it},{c:.10g},{s:.10g},{t:.10g}" for it, c, s, t in self.loss_trace]
        return "\n".join(lines) + "\n"


# -- objectives ------------------------------------------------------------


class _Objective:
    """Loss as a function of the generated image's pixel tensor.

    ``targets`` hold detached tensors computed once from the fixed images.
    """

    def __init__(self, backend: FeatureBackend, cfg: TransferConfig, inverted: bool, height: int, width: int):
        self.backend = backend
        self.cfg = cfg
        self.inverted = inverted
        self.style_layers = cfg.style_layers
        self.content_layers = cfg.content_layers
        self.layers = [n for n in backend.layer_names if n in set(self.style_layers) | set(self.content_layers)]
        self.dims = {n: backend.layer_shape(n, height, width) for n in self.style_layers}
        self.targets: dict = {}

    def features(self, pixels: torch.Tensor, inverted: bool | None = None):
        inv = self.inverted if inverted is None else inverted
        feats = self.backend.forward(self.backend.preprocess_tensor(pixels, inv), self.layers)
        return feats, losses.gram_set(feats, self.style_layers)

    def image_features(self, img: ImageTensor):
        # cast first so fixed images see the same arithmetic as the iterate
        with torch.no_grad():
            return self.features(torch.from_numpy(img.pixels).to(self.backend.dtype), img.inverted)

    def __call__(self, pixels: torch.Tensor):
        raise NotImplementedError

    def combine(self, content: float, style: float) -> float:
        return losses.total_difference_loss(content, style)


class DifferenceObjective(_Objective):
    def set_style_pair(self, style1: ImageTensor, style2: ImageTensor):
        f1, g1 = self.image_features(style1)
        f2, g2 = self.image_features(style2)
        self.targets["df_style"] = losses.feature_difference(
            {n: f1[n] for n in self.content_layers}, {n: f2[n] for n in self.content_layers}
        )
        self.targets["dg_style"] = losses.gram_difference(g1, g2)

    def set_content(self, content: ImageTensor):
        fc, gc = self.image_features(content)
        self.targets["f_content"] = {n: fc[n] for n in self.content_layers}
        self.targets["g_content"] = gc

    def __call__(self, pixels):
        feats, grams = self.features(pixels)
        t = self.targets
        df_gen = losses.feature_difference({n: feats[n] for n in self.content_layers}, t["f_content"])
        dg_gen = losses.gram_difference(grams, t["g_content"])
        c = losses.content_difference_loss(df_gen, t["df_style"], self.cfg.weights)
        s = losses.style_difference_loss(dg_gen, t["dg_style"], self.cfg.weights, self.dims)
        return c, s, losses.total_difference_loss(c, s)


class NstObjective(_Objective):
    def set_style(self, style: ImageTensor):
        _, gs = self.image_features(style)
        self.targets["g_style"] = gs

    def set_content(self, content: ImageTensor):
        fc, _ = self.image_features(content)
        self.targets["f_content"] = {n: fc[n] for n in self.content_layers}

    def __call__(self, pixels):
        feats, grams = self.features(pixels)
        c = losses.content_loss({n: feats[n] for n in self.content_layers}, self.targets["f_content"], self.cfg.weights)
        s = losses.style_loss(grams, self.targets["g_style"], self.cfg.weights, self.dims)
        return c, s, losses.nst_total(c, s, self.cfg.nst_weights)

    def combine(self, content: float, style: float) -> float:
        return losses.nst_total(content, style, self.cfg.nst_weights)


# -- optimization loop -----------------------------------------------------


def init_generated(content: ImageTensor, mode: str = "content", seed: int = 0) -> ImageTensor:
    """Starting point: a copy of the content image, or seeded uniform noise of the same shape."""
    check_choice(mode, INITS, "init")
    if mode == "content":
        return ImageTensor(content.pixels.copy(), content.inverted)
    rng = np.random.default_rng(seed)
    return ImageTensor(rng.uniform(0.0, 1.0, content.shape), content.inverted)


class _MemoClosure:
    """Closure for the optimizer, memoized on the exact bytes of the iterate.

    L-BFGS re-evaluates the point its line search just accepted; the memo
    turns that into a lookup, so each accepted iterate's loss is recorded
    without another network pass.
    """

    def __init__(self, objective: _Objective, x: torch.Tensor, size: int = 64):
        self.objective = objective
        self.x = x
        self.size = size
        self.memo: OrderedDict = OrderedDict()
        self.n_evaluations = 0
        self.iteration = 0

    def _key(self):
        return hashlib.blake2b(self.x.detach().numpy().tobytes(), digest_size=16).digest()

    def evaluate(self):
        key = self._key()
        hit = self.memo.get(key)
        if hit is None:
            if self.x.grad is not None:
                self.x.grad = None
            with torch.enable_grad():
                c, s, total = self.objective(self.x)
                value = float(total.detach())
                if not np.isfinite(value):
                    raise NumericalError(self.iteration, value)
                total.backward()
            hit = (total.detach(), self.x.grad.detach().clone(), float(c.detach()), float(s.detach()), value)
            self.memo[key] = hit
            if len(self.memo) > self.size:
                self.memo.popitem(last=False)
            self.n_evaluations += 1
        self.x.grad = hit[1].clone()
        return hit

    def __call__(self):
        return self.evaluate()[0]

    def breakdown(self) -> LossBreakdown:
        _, _, c, s, _ = self.evaluate()
        return LossBreakdown(c, s, self.objective.combine(c, s))


def _to_image(x: torch.Tensor, inverted: bool) -> ImageTensor:
    return ImageTensor(x.detach().to(torch.float64).clamp(0.0, 1.0).numpy().copy(), inverted)


def _optimize(objective: _Objective, start: ImageTensor, cfg: TransferConfig) -> TransferResult:
    t0 = time.perf_counter()
    x = torch.tensor(start.pixels, dtype=cfg.dtype, requires_grad=True)
    closure = _MemoClosure(objective, x)
    if cfg.optimizer == "lbfgs":
        opt = torch.optim.LBFGS(
            [x],
            lr=1.0,
            max_iter=1,
            max_eval=cfg.lbfgs_max_eval,
            history_size=cfg.lbfgs_history,
            line_search_fn="strong_wolfe",
        )
    else:
        opt = torch.optim.Adam([x], lr=cfg.learning_rate)

    trace = [(0, *closure.breakdown())]
    snapshots = []
    every = cfg.snapshot_every or 0
    for it in range(1, cfg.iterations + 1):
        closure.iteration = it
        if cfg.optimizer == "lbfgs":
            opt.step(closure)
        else:
            closure.evaluate()
            opt.step()
        if cfg.pixel_projection == "clamp_each_step":
            with torch.no_grad():
                x.clamp_(0.0, 1.0)
        trace.append((it, *closure.breakdown()))
        if every and it % every == 0:
            snapshots.append((it, _to_image(x, start.inverted)))
        if cfg.early_stopping and it >= cfg.early_stop_window:
            old = trace[-1 - cfg.early_stop_window][3]
            if old <= 0 or (old - trace[-1][3]) / old < cfg.early_stop_tol:
                break

    if cfg.pixel_projection == "none":
        pixels = x.detach().to(torch.float64).numpy().copy()
        generated = ImageTensor(np.clip(pixels, 0.0, 1.0), start.inverted)
    else:
        generated = _to_image(x, start.inverted)
    return TransferResult(
        generated=generated,
        loss_trace=trace,
        snapshots=snapshots,
        wall_time=time.perf_counter() - t0,
        n_evaluations=closure.n_evaluations,
    )


def _prepare(cfg: TransferConfig, content, *others):
    content = check_image(content, "content")
    imgs = {"content": content}
    for name, img in others:
        imgs[name] = check_image(img, name)
    h, w = check_same_size(**imgs)
    backend = get_backend(cfg.backend, cfg.dtype)
    return backend, imgs, h, w


def build_difference_objective(cfg: TransferConfig, content, style1, style2) -> DifferenceObjective:
    backend, imgs, h, w = _prepare(cfg, content, ("style1", style1), ("style2", style2))
    obj = DifferenceObjective(backend, cfg, imgs["content"].inverted, h, w)
    obj.set_style_pair(imgs["style1"], imgs["style2"])
    obj.set_content(imgs["content"])
    return obj


def run_transfer(cfg: TransferConfig, content, style1, style2) -> TransferResult:
    """Optimize an image whose differences from ``content`` match those of ``style1`` from ``style2``."""
    if cfg.mode != "difference":
        raise ValueError("run_transfer requires mode='difference'")
    obj = build_difference_objective(cfg, content, style1, style2)
    start = init_generated(check_image(content), cfg.init, cfg.seed)
    return _optimize(obj, start, cfg)


def run_nst(cfg: TransferConfig, content, style) -> TransferResult:
    """Classic neural style transfer (content loss + Gram style loss with alpha/beta)."""
    if cfg.mode != "classic_nst":
        raise ValueError("run_nst requires mode='classic_nst'")
    backend, imgs, h, w = _prepare(cfg, content, ("style", style))
    obj = NstObjective(backend, cfg, imgs["content"].inverted, h, w)
    obj.set_style(imgs["style"])
    obj.set_content(imgs["content"])
    start = init_generated(imgs["content"], cfg.init, cfg.seed)
    return _optimize(obj, start, cfg)


def evaluate_loss(cfg: TransferConfig, content, style1, style2, candidate) -> LossBreakdown:
    """Difference losses of ``candidate``, without optimizing anything."""
    candidate = check_image(candidate, "candidate")
    obj = build_difference_objective(cfg, content, style1, style2)
    check_same_size(content=check_image(content), candidate=candidate)
    with torch.no_grad():
        pixels = torch.from_numpy(candidate.pixels).to(cfg.dtype)
        c, s, _ = _evaluate_at(obj, pixels, candidate.inverted)
    c, s = float(c), float(s)
    return LossBreakdown(c, s, obj.combine(c, s))


def _evaluate_at(obj: _Objective, pixels: torch.Tensor, inverted: bool):
    saved = obj.inverted
    obj.inverted = inverted
    try:
        return obj(pixels)
    finally:
        obj.inverted = saved


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    """``|a - n| / max(|a|, |n|)``; zero when both magnitudes are below ``floor``."""
    scale = max(abs(analytic), abs(numeric))
    if scale < floor:
        return 0.0
    return abs(analytic - numeric) / scale


class GradientReport(NamedTuple):
    max_rel_error: float
    n_checked: int
    n_skipped: int


def gradient_check_report(
    cfg: TransferConfig,
    content,
    style1,
    style2,
    candidate=None,
    n_pixels: int = 20,
    seed: int = 0,
    h: float = 1e-3,
) -> GradientReport:
    """Compare autograd pixel gradients of the total loss with central differences.

    Runs at 64-bit precision on ``n_pixels`` seeded random pixels. A pixel
    whose +-h perturbation switches a rectifier or max-pool decision is
    skipped (the difference quotient straddles a kink) and another pixel is
    drawn. Pixels where both gradients are below 1e-12 count as agreeing.
    """
    cfg64 = TransferConfig.from_dict({**cfg.to_dict(), "precision": "float64"})
    obj = build_difference_objective(cfg64, content, style1, style2)
    rng = np.random.default_rng(seed)
    content = check_image(content)
    if candidate is None:
        candidate = ImageTensor(rng.uniform(0.0, 1.0, content.shape), content.inverted)
    candidate = check_image(candidate, "candidate")
    inv = candidate.inverted
    x = torch.tensor(candidate.pixels, dtype=torch.float64, requires_grad=True)
    _, _, total = _evaluate_at(obj, x, inv)
    (grad,) = torch.autograd.grad(total, x)

    backend = obj.backend

    def pattern(pixels):
        return backend.activation_pattern(backend.preprocess_tensor(pixels, inv), obj.layers)

    base = pattern(x.detach())
    worst, checked, skipped = 0.0, 0, 0
    with torch.no_grad():
        for idx in rng.permutation(x.numel()):
            if checked >= n_pixels:
                break
            i, j, c = np.unravel_index(idx, tuple(x.shape))
            xp = x.detach().clone()
            xm = x.detach().clone()
            xp[i, j, c] += h
            xm[i, j, c] -= h
            if any(
                not all(torch.equal(a, b) for a, b in zip(base, pattern(y))) for y in (xp, xm)
            ):
                skipped += 1
                continue
            fp = float(_evaluate_at(obj, xp, inv)[2])
            fm = float(_evaluate_at(obj, xm, inv)[2])
            numeric = (fp - fm) / (2 * h)
            checked += 1
            worst = max(worst, relative_error(float(grad[i, j, c]), numeric))
    return GradientReport(worst, checked, skipped)


def gradient_check(cfg: TransferConfig, content, style1, style2, **kwargs) -> float:
    """Max relative gradient error; see :func:`gradient_check_report`."""
    return gradient_check_report(cfg, content, style1, style2, **kwargs).max_rel_error
