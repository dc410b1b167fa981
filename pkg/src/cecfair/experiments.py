"""Ablation and hyperparameter-sweep harnesses on prepared splits."""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import gc
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attribution import AUDIT_STEPS
from .audit import AuditReport, build_report, compare_runs
from .data import Dataset, SyntheticConfig, generate_synthetic, standardize, train_test_split
from .matcher import BaselineSet, CounterfactualMap, PartitionIndex, build_index, compute_baselines, match
from .model import MLPModel
from .trainer import TrainConfig, TrainHistory, TrainingData, Variant, train

log = logging.getLogger(__name__)


def _load_trim():
    name = ctypes.util.find_library("c")
    try:
        return getattr(ctypes.CDLL(name), "malloc_trim") if name else None
    except (OSError, AttributeError):
        return None


_malloc_trim = _load_trim()


def release_memory() -> None:
    """Hand freed heap pages back to the OS.

    Each training step tapes and drops hundreds of MB of mid-sized arrays.
    glibc keeps those pages, so back-to-back runs in one process creep toward
    several GB of resident memory that nothing references.  A no-op off glibc.
    """
    gc.collect()
    if _malloc_trim is not None:
        _malloc_trim(0)


SWEEP_GRID = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
SWEEP_METRICS = ("cec", "regime_B", "regime_A", "f1", "eo_gap", "pfr")


@dataclass
class Prepared:
    """A standardised split with its matching artifacts."""

    dataset: Dataset
    train: Dataset
    test: Dataset
    index: PartitionIndex
    cmap_train: CounterfactualMap
    cmap_test: CounterfactualMap
    baselines: BaselineSet
    data: TrainingData


def prepare(dataset: Dataset, test_fraction: float = 0.2, split_seed=0, tau_dist: float = 0.0) -> Prepared:
    ds = dataset if dataset.train_idx is not None else train_test_split(dataset, test_fraction, split_seed)
    ds = standardize(ds)
    tr, te = ds.train(), ds.test()
    idx = build_index(tr)
    cm_tr = match(idx, tr, tau_dist)
    bl = compute_baselines(tr)
    return Prepared(ds, tr, te, idx, cm_tr, match(idx, te, tau_dist), bl, TrainingData.build(tr, cm_tr, bl))


def prepare_synthetic(config: SyntheticConfig, test_fraction: float = 0.2, split_seed=None) -> Prepared:
    seed = config.seed if split_seed is None else split_seed
    return prepare(generate_synthetic(config), test_fraction, seed)


@dataclass
class RunResult:
    name: str
    config: TrainConfig
    model: MLPModel
    history: TrainHistory
    report: AuditReport

    def row(self) -> dict:
        r = self.report
        return {
            "name": self.name,
            "variant": self.config.variant.value,
            "seed": self.config.seed,
            "lambda_eo": self.config.lambda_eo,
            "lambda_cec": self.config.lambda_cec,
            "f1": r.f1,
            "auc": r.outcome.auc,
            "eo_gap": r.eo_gap,
            "sp_gap": r.outcome.sp_gap,
            "cec": r.cec,
            "pfr": r.pfr,
            "regime_A": r.regimes["A"],
            "regime_B": r.regimes["B"],
            "regime_C": r.regimes["C"],
            "regime_D": r.regimes["D"],
        }


def run(prepared: Prepared, config: TrainConfig, *, name: str | None = None,
        audit_steps: int = AUDIT_STEPS, theta_regime: float = 0.5) -> RunResult:
    model, hist = train(prepared.data, config, feature_names=list(prepared.train.schema.feature_names))
    rep = build_report(
        model, prepared.test, prepared.cmap_test, prepared.baselines,
        theta_regime=theta_regime, steps=audit_steps,
        config={"train": config.to_dict(), "model_name": name or config.variant.value},
    )
    release_memory()
    return RunResult(name or config.variant.value, config, model, hist, rep)


def ablation(prepared: Prepared, base: TrainConfig, variants: Iterable[Variant] = tuple(Variant),
             **kw) -> dict[str, RunResult]:
    """One run per variant on the same split and seed."""
    out = {}
    for v in variants:
        v = Variant(v)
        log.info("ablation: %s (seed %d)", v.value, base.seed)
        out[v.value] = run(prepared, replace(base, variant=v), name=v.value, **kw)
    return out


def sweep(prepared: Prepared, base: TrainConfig, grid: Sequence[float] = SWEEP_GRID, *,
          keep_reports: bool = False, **kw) -> list[dict]:
    """FULL runs over the lambda_eo x lambda_cec grid, one row per cell.

    With ``keep_reports`` each row also carries its AuditReport under "report".
    """
    rows = []
    for le in grid:
        for lc in grid:
            cfg = replace(base, variant=Variant.FULL, lambda_eo=float(le), lambda_cec=float(lc))
            log.info("sweep: lambda_eo=%g lambda_cec=%g", le, lc)
            res = run(prepared, cfg, name=f"eo{le:g}_cec{lc:g}", **kw)
            row = res.row()
            if keep_reports:
                row["report"] = res.report
            rows.append(row)
    return rows


def sweep_matrix(rows: Sequence[dict], metric: str, grid: Sequence[float] = SWEEP_GRID) -> np.ndarray:
    """Heatmap layout: rows indexed by lambda_eo, columns by lambda_cec."""
    M = np.full((len(grid), len(grid)), np.nan)
    pos = {float(g): k for k, g in enumerate(grid)}
    for r in rows:
        v = r[metric]
        M[pos[float(r["lambda_eo"])], pos[float(r["lambda_cec"])]] = np.nan if v is None else v
    return M


def write_rows(rows: Sequence[dict], path) -> None:
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to write")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def pareto_rows(results: dict[str, RunResult]) -> list[dict]:
    return compare_runs({k: r.report for k, r in results.items()})
