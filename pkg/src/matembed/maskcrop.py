"""Largest axis-aligned rectangle inside a binary mask, and cropping to it."""
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, OutOfBounds
from .imageio import as_mask


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self):
        return self.w * self.h


def _span_limits(heights):
    """Index of the nearest strictly lower bar on each side (-1 / len as sentinels)."""
    n = len(heights)
    left = np.empty(n, dtype=np.int64)
    right = np.empty(n, dtype=np.int64)
    stack = []
    for j in range(n):
        while stack and heights[stack[-1]] >= heights[j]:
            stack.pop()
        left[j] = stack[-1] if stack else -1
        stack.append(j)
    stack = []
    for j in range(n - 1, -1, -1):
        while stack and heights[stack[-1]] >= heights[j]:
            stack.pop()
        right[j] = stack[-1] if stack else n
        stack.append(j)
    return left, right


def largest_inscribed_rectangle(mask):
    """Largest rectangle of set bits, via per-row histograms and monotonic stacks.

    Every maximum-area rectangle is maximal in all four directions, so it shows
    up as the full span of its lowest bar on its bottom row; scanning all bars
    therefore sees every optimum and the tie rule (top-most, left-most, widest)
    can be applied exactly.
    """
    mask = as_mask(mask)
    if not mask.any():
        raise EmptyMask("mask selects no pixels")
    rows, cols = mask.shape
    heights = np.zeros(cols, dtype=np.int64)
    best_key = None
    best = None
    for i in range(rows):
        heights = np.where(mask[i], heights + 1, 0)
        left, right = _span_limits(heights)
        for j in range(cols):
            h = int(heights[j])
            if h == 0:
                continue
            x = int(left[j]) + 1
            w = int(right[j]) - x
            key = (-w * h, i - h + 1, x, -w)
            if best_key is None or key < best_key:
                best_key = key
                best = Rect(x=x, y=i - h + 1, w=w, h=h)
    return best


def crop(image, rect):
    image = np.asarray(image)
    rows, cols = image.shape[:2]
    if rect.w < 1 or rect.h < 1 or rect.x < 0 or rect.y < 0 or rect.x + rect.w > cols or rect.y + rect.h > rows:
        raise OutOfBounds(f"{rect} does not fit in a {cols}x{rows} image")
    return image[rect.y:rect.y + rect.h, rect.x:rect.x + rect.w].copy()
