"""Integrated-gradients attribution and the explanation-consistency (CEC) score."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Var
from .model import MLPModel, logits_graph

EPS = 1e-8
DEGENERATE_NORM = 1e-6
TRAIN_STEPS = 32
AUDIT_STEPS = 128

# instances per chunk when attributing many rows at once (bounds memory)
_CHUNK_POINTS = 1 << 13


@dataclass(frozen=True)
class Attribution:
    raw: np.ndarray
    normalized: np.ndarray
    baseline: np.ndarray
    steps: int

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.raw))

    @property
    def degenerate(self) -> bool:
        return self.norm < DEGENERATE_NORM


@dataclass(frozen=True)
class CecScore:
    raw_distance: float
    score: float

    def __float__(self) -> float:
        return self.score


def midpoints(steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("need at least one integration step")
    return (np.arange(1, steps + 1) - 0.5) / steps


def normalize(ig: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Row-wise ig / (||ig||_2 + eps)."""
    ig = np.asarray(ig, dtype=np.float64)
    return ig / (np.linalg.norm(ig, axis=-1, keepdims=True) + eps)


def _path_points(X: np.ndarray, B: np.ndarray, steps: int) -> np.ndarray:
    alpha = midpoints(steps)
    n, d = X.shape
    pts = B[:, None, :] + alpha[None, :, None] * (X - B)[:, None, :]
    return pts.reshape(n * steps, d)


def audit_workers() -> int:
    """Worker cap for attribution fan-out, from ``CEC_AUDIT_THREADS`` (default 1)."""
    raw = os.environ.get("CEC_AUDIT_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CEC_AUDIT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"CEC_AUDIT_THREADS must be a positive integer, got {raw!r}")
    return n


def _ig_chunk(model, params, X, B, steps):
    Z = Var(_path_points(X, B, steps), requires_grad=True)
    (g,) = ad.grad(ad.sum(logits_graph(model, params, Z)), [Z])
    return (X - B) * g.value.reshape(X.shape[0], steps, -1).mean(axis=1)


def ig_batch(model: MLPModel, X, B, steps: int = AUDIT_STEPS, workers: int | None = None) -> np.ndarray:
    """Raw IG for each row of ``X`` against the matching row of ``B``.

    Midpoint rule with ``steps`` equal sub-intervals.  ``B`` may be a single
    baseline vector shared by every row.  Rows are processed in chunks; with
    ``workers > 1`` chunks run on a thread pool and are written back by
    position, so results do not depend on the worker count.
    """
    X = model._check(X)
    B = np.broadcast_to(np.asarray(B, dtype=np.float64), X.shape)
    params = [Var(p) for p in model.parameters()]
    per_chunk = max(1, _CHUNK_POINTS // steps)
    bounds = [(lo, min(lo + per_chunk, X.shape[0])) for lo in range(0, X.shape[0], per_chunk)]
    workers = audit_workers() if workers is None else workers
    out = np.empty_like(X)
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda lh: _ig_chunk(model, params, X[lh[0]:lh[1]], B[lh[0]:lh[1]], steps), bounds))
    else:
        parts = [_ig_chunk(model, params, X[lo:hi], B[lo:hi], steps) for lo, hi in bounds]
    for (lo, hi), part in zip(bounds, parts):
        out[lo:hi] = part
    return out


def ig_graph(model: MLPModel, params: Sequence[Var], X: np.ndarray, B: np.ndarray, steps: int) -> Var:
    """Taped IG of shape (n, d); differentiable w.r.t. ``params``.

    Always evaluated without dropout so attributions are deterministic.
    """
    n, d = X.shape
    Z = Var(_path_points(X, B, steps), requires_grad=True)
    out = ad.sum(logits_graph(model, params, Z))
    (g,) = ad.grad(out, [Z], create_graph=True)
    avg = ad.mean(ad.reshape(g, (n, steps, d)), axis=1)
    return ad.mul(avg, X - B)


def normalize_graph(ig: Var, eps: float = EPS) -> Var:
    norm = ad.sqrt(ad.sum(ad.square(ig), axis=1, keepdims=True))
    return ad.div(ig, ad.add(norm, eps))


def integrated_gradients(model: MLPModel, x, b, steps: int = AUDIT_STEPS) -> Attribution:
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.shape != b.shape or x.ndim != 1:
        raise ContractError("x and baseline must be vectors of equal length")
    raw = ig_batch(model, x[None, :], b[None, :], steps)[0]
    return Attribution(raw, normalize(raw), b, steps)


def pair_attributions(
    model: MLPModel,
    x,
    x_cf,
    baseline,
    steps: int = AUDIT_STEPS,
    *,
    cell: tuple[int, int] | None = None,
    baseline_cell: tuple[int, int] | None = None,
) -> tuple[Attribution, Attribution]:
    """Attribute a factual and its counterfactual against one shared baseline.

    ``cell`` is the factual's (label, group); when ``baseline_cell`` is also
    given the two must agree, since the baseline has to be the factual's
    label-group mean.
    """
    if cell is not None and baseline_cell is not None and tuple(cell) != tuple(baseline_cell):
        raise ContractError(f"baseline from cell {baseline_cell} used for a pair in cell {cell}")
    x = np.asarray(x, dtype=np.float64)
    x_cf = np.asarray(x_cf, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    raw = ig_batch(model, np.stack([x, x_cf]), np.stack([b, b]), steps)
    return (
        Attribution(raw[0], normalize(raw[0]), b, steps),
        Attribution(raw[1], normalize(raw[1]), b, steps),
    )


def cec_score(attr_x, attr_cf) -> CecScore:
    """Half the L2 distance between the two unit attribution directions.

    Accepts :class:`Attribution` objects (their ``normalized`` field is used)
    or plain raw attribution vectors, which are normalised here.
    """
    g = attr_x.normalized if isinstance(attr_x, Attribution) else normalize(attr_x)
    h = attr_cf.normalized if isinstance(attr_cf, Attribution) else normalize(attr_cf)
    raw = min(float(np.linalg.norm(g - h)), 2.0)
    return CecScore(raw, raw / 2.0)


def cec_scores(ig_x: np.ndarray, ig_cf: np.ndarray) -> np.ndarray:
    """Vectorised per-pair CEC from raw attributions (rows are pairs)."""
    d = np.linalg.norm(normalize(ig_x) - normalize(ig_cf), axis=-1)
    return np.minimum(d, 2.0) / 2.0


@dataclass(frozen=True)
class PairScores:
    """Per-pair attribution results for a set of matched pairs."""

    row_ids: np.ndarray
    ig_x: np.ndarray
    ig_cf: np.ndarray
    scores: np.ndarray
    degenerate: np.ndarray
    steps: int


def score_pairs(model: MLPModel, pairs, steps: int = AUDIT_STEPS) -> PairScores:
    n = len(pairs)
    raw = ig_batch(
        model,
        np.concatenate([pairs.x, pairs.x_cf]),
        np.concatenate([pairs.baseline, pairs.baseline]),
        steps,
    )
    ig_x, ig_cf = raw[:n], raw[n:]
    degenerate = (np.linalg.norm(ig_x, axis=1) < DEGENERATE_NORM) | (
        np.linalg.norm(ig_cf, axis=1) < DEGENERATE_NORM
    )
    return PairScores(pairs.row_ids, ig_x, ig_cf, cec_scores(ig_x, ig_cf), degenerate, steps)


@dataclass(frozen=True)
class PopulationCec:
    value: float
    n_pairs: int
    n_unmatched: int
    n_degenerate: int
    value_excluding_degenerate: float | None

    def __float__(self) -> float:
        return self.value


def summarize_scores(scores: np.ndarray, degenerate: np.ndarray, n_unmatched: int = 0) -> PopulationCec:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("population CEC needs at least one matched pair")
    degenerate = np.asarray(degenerate, dtype=bool)
    keep = scores[~degenerate]
    return PopulationCec(
        value=float(scores.mean()),
        n_pairs=int(scores.size),
        n_unmatched=int(n_unmatched),
        n_degenerate=int(degenerate.sum()),
        value_excluding_degenerate=float(keep.mean()) if keep.size else None,
    )


def population_cec(model: MLPModel, pairs, steps: int = AUDIT_STEPS) -> PopulationCec:
    """Mean per-pair CEC over matched pairs."""
    if len(pairs) == 0:
        raise ValueError("population CEC needs at least one matched pair")
    ps = score_pairs(model, pairs, steps)
    return summarize_scores(ps.scores, ps.degenerate, getattr(pairs, "n_unmatched", 0))


def write_attributions_csv(
    path: str | Path,
    row_ids: np.ndarray,
    raw: np.ndarray,
    feature_names: Sequence[str],
) -> None:
    """Long-format dump: one line per (instance, feature)."""
    norm = normalize(raw)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "feature", "raw", "normalized"])
        for rid, r, z in zip(row_ids, raw, norm):
            for name, rv, zv in zip(feature_names, r, z):
                w.writerow([int(rid), name, repr(float(rv)), repr(float(zv))])
