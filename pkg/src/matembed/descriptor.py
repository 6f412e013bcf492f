"""Raw material/part descriptors: quantized color histograms and vector helpers."""
import numpy as np

from .errors import DimensionMismatch, EmptyMask, ZeroVector
from .imageio import as_image, as_mask

N_COLOR_BINS = 1000
_LEVELS = 10

_NORM_FLOOR = 1e-12


def quantize_color(r, g, b):
    """Map an 8-bit RGB triple onto a uniform 10x10x10 grid, returning 0..999."""
    for c in (r, g, b):
        if not 0 <= int(c) <= 255:
            raise ValueError(f"channel value {c} outside 0..255")
    return 100 * (int(r) * _LEVELS // 256) + 10 * (int(g) * _LEVELS // 256) + int(b) * _LEVELS // 256


def quantize_pixels(pixels):
    """Vectorized :func:`quantize_color` over an ``(..., 3)`` uint8 array."""
    q = (np.asarray(pixels, dtype=np.int64) * _LEVELS) // 256
    return 100 * q[..., 0] + 10 * q[..., 1] + q[..., 2]


def color_histogram(image, mask):
    """Normalized 1000-bin color histogram of the pixels selected by ``mask``."""
    image = as_image(image)
    mask = as_mask(mask)
    if image.shape[:2] != mask.shape:
        raise DimensionMismatch(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("mask selects no pixels")
    bins = quantize_pixels(image[mask])
    counts = np.bincount(bins, minlength=N_COLOR_BINS)
    return counts.astype(np.float64) / n


def l2_normalize(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm > _NORM_FLOOR:
        raise ZeroVector("cannot normalize a vector with norm <= 1e-12")
    return v / norm


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if not (na > _NORM_FLOOR and nb > _NORM_FLOOR):
        raise ZeroVector("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def concat_descriptors(parts, weights):
    """Weighted concatenation of individually normalized blocks, renormalized.

    A zero weight leaves its block as zeros; the combined vector always has
    unit norm.
    """
    if len(parts) == 0:
        raise ValueError("need at least one descriptor")
    if len(parts) != len(weights):
        raise DimensionMismatch(f"{len(parts)} descriptors but {len(weights)} weights")
    weights = [float(w) for w in weights]
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ValueError("weights must be non-negative with at least one positive")
    blocks = [w * l2_normalize(p) for p, w in zip(parts, weights)]
    return l2_normalize(np.concatenate(blocks))
