"""Balanced KD-tree over Gaussian means with exact k-nearest-neighbour queries.

Nodes split at the median of the axis with the widest spread.  Leaves hold
small buckets scanned with numpy.  Ties in distance are broken by the lower
point index, so results agree with an exhaustive scan element for element.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

LEAF_SIZE = 8


@dataclass
class _Node:
    start: int
    stop: int
    axis: int = -1
    split: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None


class KDTree:
    def __init__(self, points: np.ndarray, leaf_size: int = LEAF_SIZE):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("KDTree needs a non-empty (N, D) array")
        if not np.all(np.isfinite(pts)):
            bad = int(np.argwhere(~np.isfinite(pts))[0][0])
            raise ValueError(f"non-finite coordinate at point {bad}")
        self.points = pts
        self.leaf_size = max(1, leaf_size)
        self.order = np.arange(len(pts))
        self.root = self._build(0, len(pts))

    def __len__(self):
        return len(self.points)

    def _build(self, start: int, stop: int) -> _Node:
        idx = self.order[start:stop]
        sub = self.points[idx]
        node = _Node(start, stop, lo=sub.min(axis=0), hi=sub.max(axis=0))
        n = stop - start
        if n <= self.leaf_size:
            return node
        axis = int(np.argmax(node.hi - node.lo))
        if node.hi[axis] == node.lo[axis]:
            return node
        mid = n // 2
        part = np.argpartition(sub[:, axis], mid, kind="introselect")
        self.order[start:stop] = idx[part]
        node.axis = axis
        node.split = float(self.points[self.order[start + mid], axis])
        node.left = self._build(start, start + mid)
        node.right = self._build(start + mid, stop)
        return node

    def query(self, point: np.ndarray, k: int, exclude: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Return the ``k`` nearest indices and distances, ascending."""
        q = np.asarray(point, dtype=np.float64)
        heap: list[tuple[float, int]] = []  # max-heap on (d2, idx) via negation

        def worst():
            return (-heap[0][0], -heap[0][1]) if len(heap) == k else (np.inf, np.inf)

        def box_d2(node):
            d = np.maximum(node.lo - q, 0.0) + np.maximum(q - node.hi, 0.0)
            return float(d @ d)

        stack = [self.root]
        while stack:
            node = stack.pop()
            if box_d2(node) > worst()[0]:
                continue
            if node.left is None:
                idx = self.order[node.start:node.stop]
                diff = self.points[idx] - q
                d2 = np.sum(diff * diff, axis=1)
                for dd, ii in zip(d2.tolist(), idx.tolist()):
                    if ii == exclude:
                        continue
                    key = (dd, ii)
                    if len(heap) < k:
                        heapq.heappush(heap, (-dd, -ii))
                    elif key < worst():
                        heapq.heapreplace(heap, (-dd, -ii))
                continue
            if q[node.axis] < node.split:
                stack.extend((node.right, node.left))
            else:
                stack.extend((node.left, node.right))
        found = sorted((-a, -b) for a, b in heap)
        idx = np.array([i for _, i in found], dtype=np.int64)
        dist = np.sqrt(np.array([d for d, _ in found], dtype=np.float64))
        return idx, dist


def build_kdtree(means: np.ndarray) -> KDTree:
    return KDTree(means)


def knn(tree: KDTree, i: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbours of point ``i`` (itself excluded) with Euclidean distances."""
    n = len(tree)
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points {n}")
    if k <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return tree.query(tree.points[i], k, exclude=i)
