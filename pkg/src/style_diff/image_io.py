"""Loading, saving, rasterizing and thresholding of font images.

Images are held as :class:`ImageTensor`, a thin wrapper around an
``H x W x C`` float64 array in ``[0, 1]`` that remembers whether it has been
inverted (ink high-valued) or not (ink dark, the natural page convention).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

FONT_DIR = Path(__file__).parent / "fonts"

DEFAULT_CANVAS = 256
DEFAULT_MARGIN = 0.15

# Glyphs are first drawn at this size to measure their ink box.
_REFERENCE_FONT_SIZE = 512


class GlyphNotFoundError(LookupError):
    """Raised when a font has no glyph for the requested codepoint."""


@dataclass(eq=False)
class ImageTensor:
    """Float image with values in ``[0, 1]``.

    ``pixels`` has shape ``(H, W, C)`` with ``C`` in ``{1, 3}``. ``inverted``
    is True when ink is high-valued (the representation fed to the network).
    """

    pixels: np.ndarray
    inverted: bool = False
    # Pre-image of the last inversion, so that invert(invert(x)) is exact.
    _preimage: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"pixels must be HxWxC with C in (1, 3), got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def copy(self) -> ImageTensor:
        pre = None if self._preimage is None else self._preimage.copy()
        return ImageTensor(self.pixels.copy(), self.inverted, pre)

    def to_page(self) -> ImageTensor:
        """Return the image in ink-dark (non-inverted) convention."""
        return invert(self) if self.inverted else self

    def ink_ratio(self, threshold: float = 0.5) -> float:
        """Fraction of pixels carrying ink (dark pixels on the page)."""
        page = self.to_page().pixels.mean(axis=2)
        return float(np.mean(page < threshold))

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.inverted == other.inverted and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class GlyphSpec:
    font_path: str
    codepoint: int
    canvas: int = DEFAULT_CANVAS
    margin_fraction: float = DEFAULT_MARGIN

    @classmethod
    def from_char(cls, font_path, char: str, canvas=DEFAULT_CANVAS, margin_fraction=DEFAULT_MARGIN):
        if len(char) != 1:
            raise ValueError(f"expected a single character, got {char!r}")
        return cls(str(font_path), ord(char), canvas, margin_fraction)


def _check_size(size):
    if int(size) != size or size < 1:
        raise ValueError(f"image size must be a positive integer, got {size!r}")
    return int(size)


def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` float array, computed in float32.

    Upscaling samples at pixel centres with edge replication; downscaling uses
    PIL's area-aware bilinear filter.
    """
    if pixels.shape[:2] == (height, width):
        return pixels.astype(np.float64)
    out = [
        np.asarray(
            Image.fromarray(pixels[:, :, c].astype(np.float32), mode="F").resize(
                (width, height), Image.Resampling.BILINEAR
            )
        )
        for c in range(pixels.shape[2])
    ]
    return np.clip(np.stack(out, axis=2).astype(np.float64), 0.0, 1.0)


def load_image(path, target_size: int = DEFAULT_CANVAS, grayscale: bool = True) -> ImageTensor:
    """Read a PNG/JPEG/BMP file as a square ``target_size`` image."""
    size = _check_size(target_size)
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("L" if grayscale else "RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ImageTensor(resize_bilinear(arr, size, size))


def invert(img: ImageTensor) -> ImageTensor:
    """Map every pixel ``v`` to ``1 - v`` and toggle the ``inverted`` flag."""
    if img._preimage is not None:
        pixels = img._preimage.copy()
    else:
        pixels = 1.0 - img.pixels
    return ImageTensor(pixels, not img.inverted, img.pixels.copy())


def quantize(pixels: np.ndarray) -> np.ndarray:
    # round half up: 0.5 * 255 = 127.5 -> 128
    return np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def to_pil(img: ImageTensor) -> Image.Image:
    data = quantize(img.to_page().pixels)
    if data.shape[2] == 1:
        return Image.fromarray(data[:, :, 0], mode="L")
    return Image.fromarray(data, mode="RGB")


def save_image(img: ImageTensor, path) -> None:
    """Write ``img`` as an 8-bit PNG, un-inverting it first if needed."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    to_pil(img).save(path, format="PNG")


def binarize(img: ImageTensor, threshold: float = 0.5) -> ImageTensor:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return ImageTensor((img.pixels >= threshold).astype(np.float64), img.inverted)


def resolve_font(font_path) -> Path:
    """Find a font file by path, then by name in the bundled and matplotlib font dirs."""
    path = Path(font_path)
    if path.is_file():
        return path
    candidates = [FONT_DIR / path.name]
    try:
        import matplotlib

        candidates.append(Path(matplotlib.get_data_path()) / "fonts" / "ttf" / path.name)
    except ImportError:
        pass
    for cand in candidates:
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"font file not found: {font_path}")


def _has_glyph(font_file: Path, codepoint: int) -> bool:
    from fontTools.ttLib import TTFont

    with TTFont(str(font_file), lazy=True) as tt:
        cmap = tt.getBestCmap() or {}
    return codepoint in cmap


def _render(font_file: Path, char: str, font_size: int) -> np.ndarray:
    font = ImageFont.truetype(str(font_file), font_size)
    left, top, right, bottom = font.getbbox(char)
    pad = font_size // 4
    w = max(right - left, 1) + 2 * pad
    h = max(bottom - top, 1) + 2 * pad
    canvas = Image.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).text((pad - left, pad - top), char, fill=255, font=font)
    return np.asarray(canvas)


def _ink_box(coverage: np.ndarray):
    rows = np.flatnonzero(coverage.any(axis=1))
    cols = np.flatnonzero(coverage.any(axis=0))
    if rows.size == 0:
        return None
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def rasterize_glyph(spec: GlyphSpec) -> ImageTensor:
    """Render one glyph, black on white, scaled to fit the canvas and centred on its ink.

    Rendering is anti-aliased. Raises :class:`GlyphNotFoundError` if the font
    has no glyph for ``spec.codepoint``.
    """
    canvas = _check_size(spec.canvas)
    if not 0.0 <= spec.margin_fraction < 0.4:
        raise ValueError(f"margin_fraction must lie in [0, 0.4), got {spec.margin_fraction}")
    font_file = resolve_font(spec.font_path)
    if not _has_glyph(font_file, spec.codepoint):
        raise GlyphNotFoundError(f"glyph not found: U+{spec.codepoint:04X} in {font_file.name}")

    char = chr(spec.codepoint)
    page = np.ones((canvas, canvas, 1))
    box = _ink_box(_render(font_file, char, _REFERENCE_FONT_SIZE) > 0)
    if box is None:
        return ImageTensor(page)

    avail = canvas - 2 * int(round(spec.margin_fraction * canvas))
    extent = max(box[1] - box[0], box[3] - box[2])
    font_size = max(1, int(_REFERENCE_FONT_SIZE * avail / extent))
    while True:
        coverage = _render(font_file, char, font_size)
        box = _ink_box(coverage > 0)
        if max(box[1] - box[0], box[3] - box[2]) <= avail or font_size == 1:
            break
        font_size -= 1

    glyph = coverage[box[0] : box[1], box[2] : box[3]].astype(np.float64) / 255.0
    gh, gw = glyph.shape
    top = (canvas - gh) // 2
    left = (canvas - gw) // 2
    page[top : top + gh, left : left + gw, 0] = 1.0 - glyph
    return ImageTensor(page)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
