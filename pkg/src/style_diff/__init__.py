"""Neural style-difference transfer for font glyphs."""

__version__ = "0.1.0"

from .estimator import NeuralStyleTransfer, StyleDifferenceTransfer
from .features import BackendDescriptor, FeatureBackend, get_backend
from .image_io import GlyphSpec, ImageTensor, binarize, invert, load_image, rasterize_glyph, save_image
from .losses import LossWeights, NstWeights
from .transfer import TransferConfig, TransferResult, evaluate_loss, gradient_check, run_nst, run_transfer

__all__ = [
    "BackendDescriptor",
    "FeatureBackend",
    "GlyphSpec",
    "ImageTensor",
    "LossWeights",
    "NeuralStyleTransfer",
    "NstWeights",
    "StyleDifferenceTransfer",
    "TransferConfig",
    "TransferResult",
    "binarize",
    "evaluate_loss",
    "get_backend",
    "gradient_check",
    "invert",
    "load_image",
    "rasterize_glyph",
    "run_nst",
    "run_transfer",
    "save_image",
]
