"""Membership tests for sampled descriptor subspaces.

A subspace is the set of descriptors lying within some radius of at least one
stored sample. Samples can be thinned first so the kept set is pairwise
separated but still covers every dropped sample. Lookups go through an exact
KD-tree.
"""
import json
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch
from .synthdata import read_matrix, write_matrix

LEAF_SIZE = 8


def _sq_dists(points, q):
    diff = points - q
    return (diff * diff).sum(axis=1)


class KdTree:
    """Median-split KD-tree over ``(N, D)`` points with exact nearest-neighbor queries.

    Splits cycle through the axes. Each node stores the index range of its
    points in a permutation array; leaves hold at most ``leaf_size`` points.
    """

    def __init__(self, ids, points, leaf_size=LEAF_SIZE):
        points = np.array(points, dtype=np.float64)
        if points.ndim != 2 or len(points) == 0:
            raise DimensionMismatch(f"points must be a non-empty (N, D) array, got {points.shape}")
        if len(ids) != len(points):
            raise DimensionMismatch(f"{len(ids)} ids for {len(points)} points")
        self.ids = list(ids)
        self.dim = points.shape[1]
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        id_rank = np.empty(len(self.ids), dtype=np.int64)
        id_rank[order] = np.arange(len(self.ids))

        # node arrays: split axis (-1 for leaves), threshold, children, index range
        self._axis, self._thr, self._left, self._right, self._lo, self._hi = [], [], [], [], [], []
        perm = np.arange(len(points))
        self._build(points, perm, 0, len(points), 0, leaf_size)
        self.perm = perm
        self.points = points[perm]
        self.id_rank = id_rank[perm]
        self.points.setflags(write=False)

    def _new_node(self, axis, thr, lo, hi):
        for lst, v in ((self._axis, axis), (self._thr, thr), (self._left, -1), (self._right, -1),
                       (self._lo, lo), (self._hi, hi)):
            lst.append(v)
        return len(self._axis) - 1

    def _build(self, points, perm, lo, hi, depth, leaf_size):
        if hi - lo <= leaf_size:
            return self._new_node(-1, 0.0, lo, hi)
        axis = depth % self.dim
        seg = perm[lo:hi]
        seg[:] = seg[np.argsort(points[seg, axis], kind="stable")]
        mid = lo + (hi - lo) // 2
        thr = float(points[perm[mid], axis])
        node = self._new_node(axis, thr, lo, hi)
        # left holds coordinates <= thr on this axis, right holds >= thr
        self._left[node] = self._build(points, perm, lo, mid, depth + 1, leaf_size)
        self._right[node] = self._build(points, perm, mid, hi, depth + 1, leaf_size)
        return node

    def __len__(self):
        return len(self.ids)

    def _check(self, q):
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query has shape {q.shape}, tree holds {self.dim}-D points")
        return q

    def nearest(self, q):
        """Exact nearest stored point as ``(id, euclidean distance)``; ties go to the smaller id."""
        q = self._check(q)
        best_d2, best_rank, best_pos = np.inf, None, -1
        stack = [0]
        while stack:
            node = stack.pop()
            axis = self._axis[node]
            if axis < 0:
                lo, hi = self._lo[node], self._hi[node]
                d2 = _sq_dists(self.points[lo:hi], q)
                for j in range(hi - lo):
                    r = self.id_rank[lo + j]
                    if d2[j] < best_d2 or (d2[j] == best_d2 and r < best_rank):
                        best_d2, best_rank, best_pos = d2[j], r, lo + j
                continue
            gap = q[axis] - self._thr[node]
            near, far = (self._left[node], self._right[node]) if gap <= 0 else (self._right[node], self._left[node])
            # far side can only hold a point at least |gap| away; <= keeps equal-distance ties reachable
            if gap * gap <= best_d2:
                stack.append(far)
            stack.append(near)
        return self.ids[self.perm[best_pos]], float(np.sqrt(best_d2))

    def contains(self, q, radius):
        if radius < 0:
            raise ValueError("radius must be >= 0")
        return self.nearest(q)[1] <= radius


def build(points, ids=None, leaf_size=LEAF_SIZE):
    """Build a tree from ``(id, vector)`` pairs, or from a matrix plus ``ids``."""
    if ids is None:
        pairs = list(points)
        if not pairs:
            raise DimensionMismatch("cannot build a tree from no points")
        ids = [i for i, _ in pairs]
        dims = {len(v) for _, v in pairs}
        if len(dims) != 1:
            raise DimensionMismatch(f"points have mixed dimensionality {sorted(dims)}")
        points = [v for _, v in pairs]
    return KdTree(ids, points, leaf_size=leaf_size)


def thin(points, radius):
    """Greedy in-order thinning; returns indices of the kept points.

    A point is kept iff it is farther than ``radius`` from every point kept
    before it.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DimensionMismatch(f"points must be (N, D), got {points.shape}")
    r2 = radius * radius
    kept = []
    kept_pts = np.empty_like(points)
    for i, p in enumerate(points):
        if not kept or _sq_dists(kept_pts[: len(kept)], p).min() > r2:
            kept_pts[len(kept)] = p
            kept.append(i)
    return kept


def save_tree(tree, out_dir):
    """Persist the raw points and ids; the structure is rebuilt on load."""
    out = Path(out_dir)
    order = np.argsort(tree.perm)
    write_matrix(out / "subspace.mceb", tree.points[order])
    with open(out / "subspace_ids.json", "w", encoding="utf-8") as fh:
        json.dump({"ids": tree.ids}, fh, indent=1)
        fh.write("\n")
    return [out / "subspace.mceb", out / "subspace_ids.json"]


def load_tree(tree_dir):
    tree_dir = Path(tree_dir)
    points = read_matrix(tree_dir / "subspace.mceb")
    with open(tree_dir / "subspace_ids.json", encoding="utf-8") as fh:
        ids = json.load(fh)["ids"]
    return KdTree(ids, points)
