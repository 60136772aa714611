"""Command-line interface.

Exit codes: 0 on success, 1 on runtime or numerical failure, 2 on usage
errors (bad flags, malformed specs).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiments import (
    ExperimentSpec,
    SpecError,
    admissibility_warnings,
    backend_checksum,
    diff_counts,
    diff_visualization,
    layer_sweep,
    load_spec,
    run_experiment,
    write_run,
)
from .features import BackendDescriptor, WeightsUnavailableError
from .image_io import GlyphNotFoundError, GlyphSpec, load_image, rasterize_glyph, save_image
from .losses import NstWeights
from .transfer import (
    DEFAULT_CONTENT_LAYER,
    DEFAULT_STYLE_LAYERS,
    NumericalError,
    TransferConfig,
    default_weights,
    run_nst,
    run_transfer,
)
from . import __version__

logger = logging.getLogger("style_diff")


class UsageError(Exception):
    pass


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {value}")
    return value


def unit_interval(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1), got {value}")
    return value


def layer_list(text: str) -> list[str]:
    layers = [t.strip() for t in text.split(",") if t.strip()]
    if not layers:
        raise argparse.ArgumentTypeError("expected a comma-separated list of layer names")
    return layers


def existing_file(text: str) -> Path:
    path = Path(text)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"file not found: {text}")
    return path


def _add_optimization_flags(p: argparse.ArgumentParser):
    p.add_argument("--size", type=positive_int, default=256, help="image size in px (default: 256)")
    p.add_argument(
        "--iterations", type=positive_int, default=1000, help="optimizer iterations (default: 1000)"
    )
    p.add_argument(
        "--init", choices=("content", "random"), default="content",
        help="initial generated image (default: content)",
    )
    p.add_argument(
        "--optimizer", choices=("lbfgs", "first_order"), default="lbfgs",
        help="lbfgs or Adam-style first-order descent (default: lbfgs)",
    )
    p.add_argument(
        "--style-layers", type=layer_list, default=None,
        help=f"comma-separated style layers (default: {','.join(DEFAULT_STYLE_LAYERS)}; "
        "tiny backend: conv1,conv2,conv3); weight 10^3/N_l^2 each",
    )
    p.add_argument(
        "--content-layers", type=layer_list, default=None,
        help=f"comma-separated content layers (default: {DEFAULT_CONTENT_LAYER}; "
        "tiny backend: conv2); weight 10^4 each",
    )
    p.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    p.add_argument("--seed", type=int, default=0, help="seed for random init (default: 0)")
    p.add_argument(
        "--snapshot-every", type=non_negative_int, default=0, help="write iter_<N>.png every N iterations; 0 disables (default: 0)"
    )
    p.add_argument(
        "--pixel-projection", choices=("none", "clamp_each_step", "clamp_final"), default="clamp_final",
        help="how pixels are kept in [0, 1] (default: clamp_final)",
    )
    p.add_argument("--backend", choices=("vgg", "tiny"), default="vgg", help="feature network (default: vgg)")
    p.add_argument("--vgg-depth", type=int, choices=(16, 19), default=19, help="VGG depth (default: 19)")
    p.add_argument("--pooling", choices=("max", "avg"), default="max", help="VGG pooling (default: max)")
    p.add_argument(
        "--weights-dir", default=None, help="directory holding cached VGG weights (default: $STYLE_DIFF_WEIGHTS_DIR)"
    )


def _config_from_args(args, mode: str) -> TransferConfig:
    if args.backend == "tiny":
        desc = BackendDescriptor.tiny(seed=0)
    else:
        desc = BackendDescriptor(kind="vgg", depth=args.vgg_depth, pooling=args.pooling, weights_dir=args.weights_dir)
    try:
        weights = default_weights(desc, args.style_layers, args.content_layers)
        extra = {"nst_weights": NstWeights(args.alpha, args.beta)} if mode == "classic_nst" else {}
        return TransferConfig(
            backend=desc,
            weights=weights,
            mode=mode,
            iterations=args.iterations,
            optimizer=args.optimizer,
            init=args.init,
            seed=args.seed,
            snapshot_every=args.snapshot_every or None,
            pixel_projection=args.pixel_projection,
            **extra,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load(path: Path, size: int):
    return load_image(path, size, grayscale=True)


def cmd_transfer(args) -> int:
    cfg = _config_from_args(args, "difference")
    images = {
        "content": _load(args.content, args.size),
        "style1": _load(args.style1, args.size),
        "style2": _load(args.style2, args.size),
    }
    warnings = admissibility_warnings(images["content"], images["style2"])
    for w in warnings:
        logger.warning(w)
    result = run_transfer(cfg, images["content"], images["style1"], images["style2"])
    manifest = {
        "name": "transfer",
        "inputs": {k: str(getattr(args, k)) for k in ("content", "style1", "style2")},
        "transfer": cfg.to_dict(),
        "backend_checksum": backend_checksum(cfg.backend),
        "warnings": warnings,
        "version": __version__,
    }
    out = write_run(args.out, result, manifest, images)
    print(f"initial loss {result.initial_loss:.6g}  final loss {result.final_loss:.6g}")
    print(f"wrote {out}")
    return 0


def cmd_nst(args) -> int:
    cfg = _config_from_args(args, "classic_nst")
    images = {"content": _load(args.content, args.size), "style": _load(args.style, args.size)}
    result = run_nst(cfg, images["content"], images["style"])
    manifest = {
        "name": "nst",
        "inputs": {"content": str(args.content), "style": str(args.style)},
        "transfer": cfg.to_dict(),
        "backend_checksum": backend_checksum(cfg.backend),
        "version": __version__,
    }
    out = write_run(args.out, result, manifest, images, header=("iteration", "content", "style", "total"))
    print(f"initial loss {result.initial_loss:.6g}  final loss {result.final_loss:.6g}")
    print(f"wrote {out}")
    return 0


def cmd_rasterize(args) -> int:
    if len(args.char) != 1:
        raise UsageError(f"--char must be a single character, got {args.char!r}")
    img = rasterize_glyph(GlyphSpec(str(args.font), ord(args.char), args.size, args.margin))
    save_image(img, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_diff_viz(args) -> int:
    a = load_image(args.a, args.size, grayscale=True) if args.size else _load_native(args.a)
    b = load_image(args.b, args.size, grayscale=True) if args.size else _load_native(args.b)
    if (a.height, a.width) != (b.height, b.width):
        raise UsageError(f"images differ in size: {a.height}x{a.width} vs {b.height}x{b.width}")
    viz = diff_visualization(a, b, args.threshold)
    save_image(viz, args.out)
    counts = diff_counts(viz)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def _load_native(path: Path):
    from PIL import Image

    with Image.open(path) as im:
        w, h = im.size
    if w != h:
        raise UsageError(f"{path} is not square; pass --size to resize")
    return load_image(path, w, grayscale=True)


def _spec(path) -> ExperimentSpec:
    try:
        return load_spec(path)
    except SpecError as exc:
        raise UsageError(f"invalid spec {path}: {exc}") from None


def cmd_sweep(args) -> int:
    spec = _spec(args.spec)
    if args.iterations is not None:
        spec.transfer = TransferConfig.from_dict({**spec.transfer.to_dict(), "iterations": args.iterations})
    out = layer_sweep(spec, args.axis, args.out, n_jobs=args.jobs)
    print(f"wrote {out}")
    return 0


def cmd_run_spec(args) -> int:
    spec = _spec(args.spec)
    try:
        out = run_experiment(spec, args.out)
    except SpecError as exc:
        raise UsageError(f"invalid spec {args.spec}: {exc}") from None
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="style-diff", description="Neural style-difference transfer for font glyphs.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transfer", help="transfer the style1-style2 difference onto a content glyph")
    p.add_argument("--content", type=existing_file, required=True, help="content image")
    p.add_argument("--style1", type=existing_file, required=True, help="style image 1 (has the feature to add)")
    p.add_argument("--style2", type=existing_file, required=True, help="style image 2 (styled like the content)")
    _add_optimization_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("nst", help="classic neural style transfer (comparison mode)")
    p.add_argument("--content", type=existing_file, required=True, help="content image")
    p.add_argument("--style", type=existing_file, required=True, help="style image")
    p.add_argument("--alpha", type=non_negative_float, default=1.0, help="content loss factor (default: 1)")
    p.add_argument("--beta", type=non_negative_float, default=1e3, help="style loss factor (default: 1000)")
    _add_optimization_flags(p)
    p.set_defaults(func=cmd_nst)

    p = sub.add_parser("rasterize", help="render one glyph to a PNG")
    p.add_argument("--font", required=True, help="TrueType/OpenType file, or a bundled font name")
    p.add_argument("--char", required=True, help="character to render")
    p.add_argument("--size", type=positive_int, default=256, help="canvas size in px (default: 256)")
    p.add_argument("--margin", type=float, default=0.15, help="margin fraction of the canvas (default: 0.15)")
    p.add_argument("--out", type=Path, required=True, help="output PNG")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("diff-viz", help="red/blue ink difference of two images")
    p.add_argument("--a", type=existing_file, required=True, help="first image (ink only here is red)")
    p.add_argument("--b", type=existing_file, required=True, help="second image (ink only here is blue)")
    p.add_argument("--threshold", type=unit_interval, default=0.5, help="binarization threshold (default: 0.5)")
    p.add_argument("--size", type=positive_int, default=None, help="resize both images first (default: keep size)")
    p.add_argument("--out", type=Path, required=True, help="output PNG")
    p.set_defaults(func=cmd_diff_viz)

    p = sub.add_parser("sweep", help="one run per content or style layer")
    p.add_argument("--spec", type=existing_file, required=True, help="experiment spec (YAML)")
    p.add_argument("--axis", choices=("content", "style"), required=True, help="which layer set to sweep")
    p.add_argument("--iterations", type=positive_int, default=None, help="override the spec's iteration count")
    p.add_argument("--jobs", type=positive_int, default=1, help="parallel worker processes (default: 1)")
    p.add_argument("--out", type=Path, default=None, help="sweep directory (default: <spec output dir>/sweep_<axis>)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("run-spec", help="run an experiment spec")
    p.add_argument("--spec", type=existing_file, required=True, help="experiment spec (YAML)")
    p.add_argument("--out", type=Path, default=None, help="run directory (default: from the spec)")
    p.set_defaults(func=cmd_run_spec)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GlyphNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, WeightsUnavailableError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
