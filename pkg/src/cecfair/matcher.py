"""Label-stratified opposite-group nearest-neighbour counterfactuals.

For each query row the counterfactual is the training row from the opposite
protected group with the *same* label that is closest in standardised
financial-feature space.  Four KD-trees, one per (label, group) cell, serve
the queries.  Label-group mean baselines are computed alongside.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .data import Dataset
from .kdtree import KDTree

UNMATCHED = -1
CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))


class MatchWarning(UserWarning):
    pass


@dataclass
class Cell:
    key: tuple[int, int]
    row_ids: np.ndarray      # global row ids, ascending
    features: np.ndarray     # standardised financial sub-matrix
    tree: KDTree | None

    @property
    def size(self) -> int:
        return int(self.row_ids.size)


@dataclass
class PartitionIndex:
    cells: dict[tuple[int, int], Cell]
    financial_idx: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray
    X: np.ndarray            # full training matrix, model-input space
    row_ids: np.ndarray

    def standardize(self, X_fin: np.ndarray) -> np.ndarray:
        return (X_fin - self.mean) / self.std

    @property
    def empty_cells(self) -> list[tuple[int, int]]:
        return [k for k, c in self.cells.items() if c.size == 0]

    def row(self, row_id: int) -> np.ndarray:
        return self.X[int(np.searchsorted(self.row_ids, row_id))]


def build_index(train: Dataset, leafsize: int = 16) -> PartitionIndex:
    """Partition training rows by (y, a) and index each cell's financial features.

    Financial features are re-standardised with training statistics; if the
    data were already standardised on this split this is the identity.
    """
    if train.n == 0:
        raise ValueError("all four (label, group) cells are empty")
    fin = list(train.schema.financial_idx)
    F = train.X[:, fin]
    mu, sd = F.mean(axis=0), F.std(axis=0)
    if np.any(sd == 0):
        raise ValueError("a financial feature is constant on the training split")
    Fz = (F - mu) / sd
    order = np.argsort(train.row_ids, kind="stable")
    y, a = train.y, train.a
    cells = {}
    for key in CELLS:
        pos = order[(y[order] == key[0]) & (a[order] == key[1])]
        feats = Fz[pos]
        cells[key] = Cell(key, train.row_ids[pos], feats, KDTree(feats, leafsize) if pos.size else None)
    if all(c.size == 0 for c in cells.values()):
        raise ValueError("all four (label, group) cells are empty")
    empty = [k for k, c in cells.items() if c.size == 0]
    if empty:
        warnings.warn(f"empty (label, group) cells {empty}; their queries will be unmatched", MatchWarning)
    return PartitionIndex(cells, tuple(fin), mu, sd, train.X[order], train.row_ids[order])


@dataclass
class CounterfactualMap:
    row_ids: np.ndarray         # query rows
    matched_ids: np.ndarray     # UNMATCHED (-1) when no acceptable match
    distances: np.ndarray       # nan when unmatched
    x_cf: np.ndarray            # full counterfactual vectors, nan rows when unmatched
    tau_dist: float

    @property
    def matched(self) -> np.ndarray:
        return self.matched_ids != UNMATCHED

    @property
    def coverage(self) -> float:
        return float(self.matched.mean()) if self.row_ids.size else 0.0

    @property
    def n_unmatched(self) -> int:
        return int((~self.matched).sum())

    def __len__(self) -> int:
        return int(self.row_ids.size)

    def lookup(self, row_ids) -> np.ndarray:
        """Positions in this map for the given query row ids."""
        order = np.argsort(self.row_ids, kind="stable")
        pos = np.searchsorted(self.row_ids[order], row_ids)
        pos = np.clip(pos, 0, max(len(self) - 1, 0))
        found = order[pos]
        if not np.array_equal(self.row_ids[found], np.asarray(row_ids)):
            raise KeyError("some rows are not in the counterfactual map")
        return found

    def distance_histogram(self, bins: int = 20) -> dict:
        d = self.distances[self.matched]
        if d.size == 0:
            return {"edges": [], "counts": []}
        counts, edges = np.histogram(d, bins=bins)
        return {"edges": edges.tolist(), "counts": counts.tolist()}


def match(index: PartitionIndex, dataset: Dataset, tau_dist: float = 0.0) -> CounterfactualMap:
    """Nearest opposite-group, same-label training row for every row of ``dataset``.

    ``tau_dist > 0`` marks matches farther than ``tau_dist`` as unmatched;
    ``tau_dist == 0`` disables the threshold.
    """
    if tau_dist < 0:
        raise ValueError("tau_dist must be nonnegative")
    Q = index.standardize(dataset.X[:, list(index.financial_idx)])
    n = dataset.n
    matched = np.full(n, UNMATCHED, dtype=np.int64)
    dist = np.full(n, np.nan)
    x_cf = np.full((n, dataset.d), np.nan)
    y, a = dataset.y, dataset.a
    for i in range(n):
        cell = index.cells[(int(y[i]), 1 - int(a[i]))]
        if cell.tree is None:
            continue
        j, dstar = cell.tree.query(Q[i])
        if tau_dist > 0 and dstar > tau_dist:
            continue
        rid = int(cell.row_ids[j])
        matched[i], dist[i] = rid, dstar
        x_cf[i] = index.row(rid)
    cmap = CounterfactualMap(dataset.row_ids.copy(), matched, dist, x_cf, float(tau_dist))
    if tau_dist > 0 and n and cmap.coverage < 0.5:
        warnings.warn(f"match coverage is only {cmap.coverage:.1%} at tau_dist={tau_dist}", MatchWarning)
    return cmap


@dataclass
class BaselineSet:
    baselines: dict[tuple[int, int], np.ndarray]
    counts: dict[tuple[int, int], int]

    def get(self, y: int, a: int) -> np.ndarray:
        key = (int(y), int(a))
        if key not in self.baselines:
            raise ContractError(f"no baseline for empty cell (y={key[0]}, a={key[1]})")
        return self.baselines[key]

    def to_dict(self) -> dict:
        return {
            f"{y},{a}": {"mean": b.tolist(), "count": self.counts[(y, a)]}
            for (y, a), b in sorted(self.baselines.items())
        }

    @classmethod
    def from_dict(cls, d: dict) -> BaselineSet:
        bl, counts = {}, {}
        for key, v in d.items():
            y, a = (int(s) for s in key.split(","))
            bl[(y, a)] = np.asarray(v["mean"], dtype=np.float64)
            counts[(y, a)] = int(v["count"])
        return cls(bl, counts)


def compute_baselines(train: Dataset) -> BaselineSet:
    """Mean of all features over each nonempty (y, a) cell of the training rows."""
    bl, counts = {}, {}
    for key in CELLS:
        rows = train.X[(train.y == key[0]) & (train.a == key[1])]
        if rows.shape[0]:
            bl[key] = rows.mean(axis=0)
            counts[key] = int(rows.shape[0])
    return BaselineSet(bl, counts)


@dataclass
class PairedDataset:
    row_ids: np.ndarray
    match_ids: np.ndarray
    x: np.ndarray
    x_cf: np.ndarray
    y: np.ndarray
    a: np.ndarray
    baseline: np.ndarray
    distances: np.ndarray
    n_unmatched: int = 0

    def __len__(self) -> int:
        return int(self.row_ids.size)

    def subset(self, idx) -> PairedDataset:
        return PairedDataset(
            self.row_ids[idx], self.match_ids[idx], self.x[idx], self.x_cf[idx],
            self.y[idx], self.a[idx], self.baseline[idx], self.distances[idx], 0,
        )


def pair(dataset: Dataset, cmap: CounterfactualMap, baselines: BaselineSet) -> PairedDataset:
    """Tuples (x, x_cf, y, a, b_{y,a}) for matched rows of ``dataset``.

    The baseline always belongs to the factual's own (label, group) cell.
    """
    pos = cmap.lookup(dataset.row_ids)
    ok = cmap.matched_ids[pos] != UNMATCHED
    keep = np.flatnonzero(ok)
    y, a = dataset.y[keep], dataset.a[keep]
    B = np.empty((keep.size, dataset.d))
    for key in CELLS:
        sel = (y == key[0]) & (a == key[1])
        if sel.any():
            B[sel] = baselines.get(*key)
    p = pos[keep]
    return PairedDataset(
        row_ids=dataset.row_ids[keep],
        match_ids=cmap.matched_ids[p],
        x=dataset.X[keep],
        x_cf=cmap.x_cf[p],
        y=y,
        a=a,
        baseline=B,
        distances=cmap.distances[p],
        n_unmatched=int((~ok).sum()),
    )


# ---------------------------------------------------------------- export


def write_map_csv(cmap: CounterfactualMap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "matched_row_id", "distance"])
        for rid, mid, d in zip(cmap.row_ids, cmap.matched_ids, cmap.distances):
            if mid == UNMATCHED:
                w.writerow([int(rid), "UNMATCHED", ""])
            else:
                w.writerow([int(rid), int(mid), repr(float(d))])


def read_map_csv(path, index: PartitionIndex, tau_dist: float = 0.0) -> CounterfactualMap:
    rows, mids, dists = [], [], []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(int(rec["row_id"]))
            if rec["matched_row_id"] == "UNMATCHED":
                mids.append(UNMATCHED)
                dists.append(np.nan)
            else:
                mids.append(int(rec["matched_row_id"]))
                dists.append(float(rec["distance"]))
    mids_a = np.asarray(mids, dtype=np.int64)
    x_cf = np.full((len(rows), index.X.shape[1]), np.nan)
    for i, m in enumerate(mids_a):
        if m != UNMATCHED:
            x_cf[i] = index.row(m)
    return CounterfactualMap(np.asarray(rows, np.int64), mids_a, np.asarray(dists), x_cf, tau_dist)


def write_baselines_json(baselines: BaselineSet, path) -> None:
    Path(path).write_text(json.dumps(baselines.to_dict(), indent=1))


def read_baselines_json(path) -> BaselineSet:
    return BaselineSet.from_dict(json.loads(Path(path).read_text()))
