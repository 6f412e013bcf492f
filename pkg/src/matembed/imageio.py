"""Netpbm image and mask IO.

Images are binary PPM (P6, maxval 255) and load as ``(H, W, 3)`` uint8 arrays.
Masks are binary PGM (P5, maxval 255) and load as ``(H, W)`` bool arrays where
any nonzero pixel counts as inside.
"""
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DimensionMismatch


def read_ppm(path):
    with PILImage.open(path) as im:
        if im.format != "PPM" or im.mode != "RGB":
            raise ValueError(f"{path}: expected binary P6 PPM, got {im.format}/{im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def read_pgm_mask(path):
    with PILImage.open(path) as im:
        if im.format != "PPM" or im.mode != "L":
            raise ValueError(f"{path}: expected binary P5 PGM, got {im.format}/{im.mode}")
        return np.asarray(im, dtype=np.uint8) > 0


def write_ppm(path, image):
    image = as_image(image)
    PILImage.fromarray(image, mode="RGB").save(Path(path), format="PPM")


def write_pgm_mask(path, mask):
    mask = as_mask(mask)
    PILImage.fromarray(mask.astype(np.uint8) * 255, mode="L").save(Path(path), format="PPM")


def as_image(image):
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatch(f"image must be (H, W, 3) with H, W >= 1, got {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any((arr < 0) | (arr > 255)):
            raise ValueError("image values must lie in 0..255")
        arr = arr.astype(np.uint8)
    return arr


def as_mask(mask):
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionMismatch(f"mask must be (H, W) with H, W >= 1, got {arr.shape}")
    return arr > 0 if arr.dtype != bool else arr
