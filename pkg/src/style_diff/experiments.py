"""Config-driven experiments, run directories and difference visualizations.

An experiment spec is a YAML file with three blocks::

    name: serif_generation_T
    input:
      size: 256            # canvas / resize target, px
      margin: 0.15         # glyph margin fraction
      char: T              # default character for glyph entries
      content: {font: cmss10.ttf}
      style1: {font: DejaVuSerif.ttf}
      style2: {font: DejaVuSans.ttf, char: T}
      # an entry may instead be {image: path/to/file.png}
    transfer:              # any TransferConfig field
      iterations: 300
      backend: {kind: vgg}
    output:
      dir: runs/serif_generation_T

Relative font and image paths resolve against the spec file's directory; a
relative output dir resolves against the working directory.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import os
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, ImageDraw

from . import __version__
from .features import VGG_WEIGHTS, BackendDescriptor
from .image_io import (
    GlyphSpec,
    ImageTensor,
    binarize,
    ensure_dir,
    load_image,
    rasterize_glyph,
    resolve_font,
    save_image,
)
from .transfer import (
    CONTENT_WEIGHT,
    DEFAULT_CONTENT_LAYER,
    DEFAULT_STYLE_LAYERS,
    TINY_CONTENT_LAYER,
    TINY_STYLE_LAYERS,
    TransferConfig,
    TransferResult,
    default_weights,
    run_nst,
    run_transfer,
    style_weight_for,
)
from .losses import LossWeights
from .validation import check_same_size

logger = logging.getLogger(__name__)

RED = (1.0, 0.0, 0.0)
BLUE = (0.0, 0.0, 1.0)
BLACK = (0.0, 0.0, 0.0)
WHITE = (1.0, 1.0, 1.0)

RUN_ARTIFACTS = ("generated.png", "loss_trace.csv", "style_diff.png", "generated_content_diff.png", "manifest.json")
INPUT_ROLES = ("content", "style1", "style2")


class SpecError(ValueError):
    """Invalid experiment spec; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# -- visualization -----------------------------------------------------------


def _ink_mask(img: ImageTensor, threshold: float) -> np.ndarray:
    page = img.to_page()
    gray = ImageTensor(page.pixels.mean(axis=2, keepdims=True))
    return binarize(gray, threshold).pixels[:, :, 0] == 0.0


def diff_visualization(a: ImageTensor, b: ImageTensor, threshold: float = 0.5) -> ImageTensor:
    """Colour-code ink differences: red only in ``a``, blue only in ``b``, black in both."""
    check_same_size(a=a, b=b)
    ink_a = _ink_mask(a, threshold)
    ink_b = _ink_mask(b, threshold)
    out = np.ones((a.height, a.width, 3))
    out[ink_a & ~ink_b] = RED
    out[~ink_a & ink_b] = BLUE
    out[ink_a & ink_b] = BLACK
    return ImageTensor(out)


def diff_counts(viz: ImageTensor) -> dict[str, int]:
    px = viz.pixels
    counts = {}
    for name, colour in (("red", RED), ("blue", BLUE), ("black", BLACK), ("white", WHITE)):
        counts[name] = int(np.all(px == colour, axis=2).sum())
    return counts


# -- specs ---------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    name: str
    content: GlyphSpec | str
    style1: GlyphSpec | str
    style2: GlyphSpec | str
    transfer: TransferConfig = field(default_factory=TransferConfig)
    output_dir: str = "runs"
    size: int = 256

    def inputs(self) -> dict:
        return {"content": self.content, "style1": self.style1, "style2": self.style2}

    def to_dict(self) -> dict:
        def entry(v):
            if isinstance(v, GlyphSpec):
                return {"font": v.font_path, "char": chr(v.codepoint), "margin": v.margin_fraction}
            return {"image": v}

        return {
            "name": self.name,
            "input": {"size": self.size, **{k: entry(v) for k, v in self.inputs().items()}},
            "transfer": self.transfer.to_dict(),
            "output": {"dir": self.output_dir},
        }


def _require(block, key, where):
    if not isinstance(block, dict) or key not in block:
        raise SpecError(f"{where}.{key}" if where else key, "missing required field")
    return block[key]


def parse_spec(data, base_dir=".") -> ExperimentSpec:
    """Validate a spec mapping and resolve paths relative to ``base_dir``."""
    if not isinstance(data, dict):
        raise SpecError("<root>", "spec must be a mapping")
    unknown = set(data) - {"name", "input", "transfer", "output"}
    if unknown:
        raise SpecError(sorted(unknown)[0], "unknown top-level field")
    base = Path(base_dir).resolve()
    name = str(_require(data, "name", ""))
    inp = _require(data, "input", "")
    if not isinstance(inp, dict):
        raise SpecError("input", "must be a mapping")
    size = inp.get("size", 256)
    if not isinstance(size, int) or isinstance(size, bool) or size < 1:
        raise SpecError("input.size", f"must be a positive integer, got {size!r}")
    margin = inp.get("margin", 0.15)
    if not isinstance(margin, (int, float)) or not 0 <= margin < 0.4:
        raise SpecError("input.margin", f"must lie in [0, 0.4), got {margin!r}")
    default_char = inp.get("char")

    entries = {}
    for role in INPUT_ROLES:
        where = f"input.{role}"
        entry = _require(inp, role, "input")
        if not isinstance(entry, dict):
            raise SpecError(where, "must be a mapping with 'font' or 'image'")
        if "image" in entry:
            path = Path(entry["image"])
            path = path if path.is_absolute() else base / path
            if not path.is_file():
                raise SpecError(f"{where}.image", f"file not found: {path}")
            entries[role] = str(path)
        elif "font" in entry:
            char = entry.get("char", default_char)
            if not isinstance(char, str) or len(char) != 1:
                raise SpecError(f"{where}.char", f"must be a single character, got {char!r}")
            font = Path(entry["font"])
            try:
                # falls back to the bundled / matplotlib font directories by file name
                font_path = resolve_font(font if font.is_absolute() else base / font).resolve()
            except FileNotFoundError:
                raise SpecError(f"{where}.font", f"font not found: {font}") from None
            entries[role] = GlyphSpec(str(font_path), ord(char), size, float(entry.get("margin", margin)))
        else:
            raise SpecError(where, "needs either 'font' or 'image'")

    tdata = data.get("transfer") or {}
    if not isinstance(tdata, dict):
        raise SpecError("transfer", "must be a mapping")
    try:
        transfer = TransferConfig.from_dict(tdata)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        named = [k for k in TransferConfig.__dataclass_fields__ if msg.startswith(k) or f"{k!r}" in msg]
        raise SpecError(f"transfer.{named[0]}" if named else "transfer", msg) from None

    out = data.get("output") or {}
    if not isinstance(out, dict):
        raise SpecError("output", "must be a mapping")
    out_dir = Path(out.get("dir", f"runs/{name}"))
    out_dir = out_dir.resolve()
    return ExperimentSpec(name, entries["content"], entries["style1"], entries["style2"], transfer, str(out_dir), size)


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SpecError("<file>", f"cannot parse YAML: {exc}") from None
    return parse_spec(data, path.parent)


def load_inputs(spec: ExperimentSpec) -> dict[str, ImageTensor]:
    """Rasterize or load the three input images and check they share a size."""
    images = {}
    for role, entry in spec.inputs().items():
        if isinstance(entry, GlyphSpec):
            images[role] = rasterize_glyph(entry)
        else:
            images[role] = load_image(entry, spec.size, grayscale=True)
    try:
        check_same_size(**images)
    except ValueError as exc:
        raise SpecError("input", str(exc)) from None
    return images


# -- run directories -----------------------------------------------------------


def backend_checksum(desc: BackendDescriptor) -> str:
    if desc.kind == "tiny":
        return f"tiny-seed-{desc.seed}"
    if not desc.pretrained:
        return f"vgg{desc.depth}-random-init-seed-{desc.seed}"
    fname, _, prefix = VGG_WEIGHTS[desc.depth]
    return f"{fname}:sha256:{prefix}"


def admissibility_warnings(content: ImageTensor, style2: ImageTensor) -> list[str]:
    """Heuristic check that style image 2 resembles the content image (ink coverage within 2x)."""
    rc, r2 = content.ink_ratio(), style2.ink_ratio()
    lo, hi = sorted((rc, r2))
    if lo == 0 or hi / lo > 2.0:
        return [f"ink ratio of style2 ({r2:.4f}) and content ({rc:.4f}) differ by more than 2x"]
    return []


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_run(out_dir, result: TransferResult, manifest: dict, images: dict, header=None) -> Path:
    """Write generated image, trace, snapshots, visualizations, and finally the manifest."""
    out = ensure_dir(out_dir)
    save_image(result.generated, out / "generated.png")
    if header is None:
        (out / "loss_trace.csv").write_text(result.trace_csv())
    else:
        (out / "loss_trace.csv").write_text(result.trace_csv(header))
    for it, snap in result.snapshots:
        save_image(snap, out / f"iter_{it}.png")
    if "style1" in images and "style2" in images:
        save_image(diff_visualization(images["style1"], images["style2"]), out / "style_diff.png")
    save_image(diff_visualization(result.generated, images["content"]), out / "generated_content_diff.png")
    manifest = dict(manifest)
    manifest["result"] = {
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "iterations_run": result.loss_trace[-1][0],
        "n_evaluations": result.n_evaluations,
        "wall_time": result.wall_time,
        "generated_content_diff": diff_counts(diff_visualization(result.generated, images["content"])),
    }
    _write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return out


def run_experiment(spec, output_dir=None) -> Path:
    """Run one experiment (spec path or :class:`ExperimentSpec`) and return its run directory."""
    if not isinstance(spec, ExperimentSpec):
        spec = load_spec(spec)
    images = load_inputs(spec)
    warnings = admissibility_warnings(images["content"], images["style2"])
    for w in warnings:
        logger.warning("%s: %s", spec.name, w)
    out_dir = Path(output_dir or spec.output_dir)
    cfg = spec.transfer
    if cfg.mode == "classic_nst":
        result = run_nst(cfg, images["content"], images["style1"])
    else:
        result = run_transfer(cfg, images["content"], images["style1"], images["style2"])
    manifest = {
        "name": spec.name,
        "spec": spec.to_dict(),
        "transfer": cfg.to_dict(),
        "backend_checksum": backend_checksum(cfg.backend),
        "warnings": warnings,
        "version": __version__,
    }
    return write_run(out_dir, result, manifest, images)


def read_manifest(run_dir) -> dict:
    return json.loads((Path(run_dir) / "manifest.json").read_text())


# -- layer sweeps --------------------------------------------------------------


def sweep_layers(desc: BackendDescriptor) -> tuple[tuple[str, ...], str]:
    if desc.kind == "tiny":
        return TINY_STYLE_LAYERS, TINY_CONTENT_LAYER
    return DEFAULT_STYLE_LAYERS, DEFAULT_CONTENT_LAYER


def sweep_weights(desc: BackendDescriptor, axis: str, layer: str) -> LossWeights:
    """Weights for one sweep cell.

    Content axis: all style layers at their default weights, ``layer`` as the
    only content layer. Style axis: ``layer`` as the only style layer, the
    content layer fixed at its default.
    """
    style_layers, content_layer = sweep_layers(desc)
    if axis == "content":
        base = default_weights(desc, style_layers, ())
        return LossWeights(base.style, {layer: CONTENT_WEIGHT})
    if axis == "style":
        return LossWeights({layer: style_weight_for(desc, layer)}, {content_layer: CONTENT_WEIGHT})
    raise ValueError(f"axis must be 'content' or 'style', got {axis!r}")


def _run_cell(spec_dict: dict, base_dir: str, out_dir: str) -> dict:
    try:
        spec = parse_spec(spec_dict, base_dir)
        run_experiment(spec, out_dir)
        return {"dir": out_dir, "status": "ok"}
    except Exception as exc:  # a failed cell must not stop the sweep
        logger.error("sweep cell %s failed: %s", out_dir, exc)
        return {"dir": out_dir, "status": "error", "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def _cell_done(out_dir: Path, transfer: dict) -> bool:
    try:
        manifest = read_manifest(out_dir)
    except (OSError, ValueError):
        return False
    return manifest.get("transfer") == transfer and all((out_dir / a).is_file() for a in RUN_ARTIFACTS)


def contact_sheet(paths, labels, out_path, tile: int = 160) -> Path:
    label_h = 18
    sheet = Image.new("RGB", (tile * max(len(paths), 1), tile + label_h), "white")
    draw = ImageDraw.Draw(sheet)
    for i, (path, label) in enumerate(zip(paths, labels)):
        if path is not None and Path(path).is_file():
            with Image.open(path) as im:
                sheet.paste(im.convert("RGB").resize((tile, tile), Image.Resampling.BILINEAR), (i * tile, label_h))
        draw.text((i * tile + 4, 3), label, fill="black")
    sheet.save(out_path)
    return Path(out_path)


def layer_sweep(base: ExperimentSpec, axis: str, output_dir=None, n_jobs: int = 1) -> Path:
    """Run one experiment per layer along ``axis`` and write a contact sheet.

    Cells whose manifest already matches their config are skipped, so an
    interrupted sweep can be restarted. Failed cells are reported in
    ``summary.json`` and do not stop the others.
    """
    desc = base.transfer.backend
    layers, _ = sweep_layers(desc)
    out = ensure_dir(output_dir or Path(base.output_dir) / f"sweep_{axis}")
    base_dict = base.to_dict()
    jobs = []
    cells = []
    for layer in layers:
        cfg = TransferConfig.from_dict({**base.transfer.to_dict(), "weights": sweep_weights(desc, axis, layer).to_dict()})
        cell_dir = out / f"{axis}_{layer}"
        cell_spec = {**base_dict, "name": f"{base.name}-{axis}-{layer}", "transfer": cfg.to_dict()}
        cells.append((layer, cell_dir))
        if _cell_done(cell_dir, cfg.to_dict()):
            continue
        jobs.append((cell_spec, ".", str(cell_dir)))

    statuses = {}
    if n_jobs > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for res in pool.map(_run_cell, *zip(*jobs)):
                statuses[res["dir"]] = res
    else:
        for job in jobs:
            res = _run_cell(*job)
            statuses[res["dir"]] = res

    summary = []
    for layer, cell_dir in cells:
        res = statuses.get(str(cell_dir), {"status": "ok", "dir": str(cell_dir), "cached": True})
        summary.append({"layer": layer, **{k: v for k, v in res.items() if k != "traceback"}})
    contact_sheet(
        [cell_dir / "generated.png" if s["status"] == "ok" else None for (_, cell_dir), s in zip(cells, summary)],
        [f"{axis}: {layer}" for layer, _ in cells],
        out / "contact_sheet.png",
    )
    _write_atomic(out / "summary.json", json.dumps({"axis": axis, "cells": summary}, indent=2))
    failed = [s for s in summary if s["status"] != "ok"]
    if failed:
        logger.warning("%d of %d sweep cells failed", len(failed), len(summary))
    return out
