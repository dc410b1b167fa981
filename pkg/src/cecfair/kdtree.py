"""Exact nearest-neighbour KD-tree with deterministic tie-breaking.

Among points at exactly the same distance the one with the smallest position
in the input array wins.  Leaves hold small buckets that are scanned with
numpy; internal nodes split on the widest dimension at the median.
"""

from __future__ import annotations

import numpy as np


class KDTree:
    def __init__(self, data: np.ndarray, leafsize: int = 16):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError("data must be a 2-D array")
        if leafsize < 1:
            raise ValueError("leafsize must be positive")
        self.data = data
        self.n, self.k = data.shape
        self.leafsize = leafsize
        # node arrays; leaves have dim == -1 and own perm[start:end]
        self._dim: list[int] = []
        self._val: list[float] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._start: list[int] = []
        self._end: list[int] = []
        self.perm = np.arange(self.n)
        if self.n:
            self._build(0, self.n)

    @property
    def size(self) -> int:
        return self.n

    def _new_node(self) -> int:
        for lst, v in ((self._dim, -1), (self._val, 0.0), (self._left, -1), (self._right, -1),
                       (self._start, 0), (self._end, 0)):
            lst.append(v)
        return len(self._dim) - 1

    def _build(self, start: int, end: int) -> int:
        node = self._new_node()
        idx = self.perm[start:end]
        if end - start <= self.leafsize:
            # keep bucket rows in ascending position so ties resolve cheaply
            self.perm[start:end] = np.sort(idx)
            self._start[node], self._end[node] = start, end
            return node
        pts = self.data[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        dim = int(np.argmax(spread))
        if spread[dim] == 0.0:
            self.perm[start:end] = np.sort(idx)
            self._start[node], self._end[node] = start, end
            return node
        mid = (end - start) // 2
        order = np.argpartition(pts[:, dim], mid)
        self.perm[start:end] = idx[order]
        split = float(self.data[self.perm[start + mid], dim])
        self._dim[node], self._val[node] = dim, split
        # left: coordinate <= split, right: coordinate >= split
        self._left[node] = self._build(start, start + mid)
        self._right[node] = self._build(start + mid, end)
        return node

    def query(self, q) -> tuple[int, float]:
        """Index of the nearest point and its Euclidean distance."""
        if self.n == 0:
            raise ValueError("query on an empty tree")
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.k,):
            raise ValueError(f"query must have shape ({self.k},)")
        best = [np.inf, -1]
        self._search(0, q, best)
        return int(best[1]), float(best[0])

    def _search(self, node: int, q: np.ndarray, best: list) -> None:
        dim = self._dim[node]
        if dim < 0:
            s, e = self._start[node], self._end[node]
            ids = self.perm[s:e]
            diff = self.data[ids] - q
            # ties are judged on the reported distance, so compare after the sqrt
            d = np.sqrt((diff * diff).sum(axis=1))
            j = int(np.argmin(d))  # first minimum, and ids are ascending
            dj, ij = float(d[j]), int(ids[j])
            if dj < best[0] or (dj == best[0] and ij < best[1]):
                best[0], best[1] = dj, ij
            return
        delta = q[dim] - self._val[node]
        near, far = (self._left[node], self._right[node]) if delta <= 0 else (self._right[node], self._left[node])
        self._search(near, q, best)
        # slack so rounding never prunes an equal-distance, lower-index point
        if abs(delta) <= best[0] * (1.0 + 1e-9):
            self._search(far, q, best)

    def count_points(self) -> int:
        """Number of points stored across all leaves."""
        return int(sum(e - s for d, s, e in zip(self._dim, self._start, self._end) if d < 0))
