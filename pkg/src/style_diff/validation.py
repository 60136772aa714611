"""Input validation helpers shared by the engine, estimators and CLI."""

from __future__ import annotations

import numpy as np

from .image_io import ImageTensor


def check_image(img, name: str = "image") -> ImageTensor:
    """Coerce ``img`` to an :class:`ImageTensor`.

    Accepts an ImageTensor or an ``H x W`` / ``H x W x C`` array in ``[0, 1]``
    (arrays are taken to be ink-dark, i.e. not inverted).
    """
    if isinstance(img, ImageTensor):
        return img
    if isinstance(img, np.ndarray):
        try:
            return ImageTensor(img)
        except ValueError as exc:
            raise ValueError(f"{name}: {exc}") from None
    raise TypeError(f"{name} must be an ImageTensor or numpy array, got {type(img).__name__}")


def check_same_size(**images: ImageTensor) -> tuple[int, int]:
    """Raise ``ValueError`` unless all images share height and width."""
    sizes = {name: (img.height, img.width) for name, img in images.items()}
    if len(set(sizes.values())) > 1:
        desc = ", ".join(f"{k}={v[0]}x{v[1]}" for k, v in sizes.items())
        raise ValueError(f"input images must have identical sizes, got {desc}")
    return next(iter(sizes.values()))


def check_choice(value, choices, name: str):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
